//! Loop-free network structure of the tensor tree.
//!
//! Leaves carry the data variables and are numbered `0..n`; internal nodes
//! are numbered `n..2n-2`. Every internal node has degree exactly 3 and
//! every leaf degree 1, so a tree over `n >= 3` variables has `n - 2`
//! internal nodes and `2n - 3` edges. One edge is designated the root; the
//! canonical form of the model hangs its central weight there.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::TopologyError;

pub type NodeId = u32;

/// Unordered pair of node ids, stored with the smaller endpoint first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge(NodeId, NodeId);

impl Edge {
    pub fn new(a: NodeId, b: NodeId) -> Self {
        if a <= b {
            Edge(a, b)
        } else {
            Edge(b, a)
        }
    }

    pub fn endpoints(&self) -> (NodeId, NodeId) {
        (self.0, self.1)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.0 == node || self.1 == node
    }

    /// The endpoint that is not `node`.
    pub fn other(&self, node: NodeId) -> NodeId {
        if self.0 == node {
            self.1
        } else {
            self.0
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.0, self.1)
    }
}

/// Which two of the four outward legs of a combined root tensor stay
/// together after decomposition. With the legs of the smaller root node
/// listed as `[a0, a1]` and the larger's as `[b0, b1]`:
///
/// - `Keep`:      (a0 a1 | b0 b1), the current structure
/// - `SwapInner`: (a0 b0 | a1 b1)
/// - `SwapOuter`: (a0 b1 | a1 b0)
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pairing {
    Keep,
    SwapInner,
    SwapOuter,
}

impl Pairing {
    pub const ALL: [Pairing; 3] = [Pairing::Keep, Pairing::SwapInner, Pairing::SwapOuter];

    pub fn index(&self) -> usize {
        match self {
            Pairing::Keep => 0,
            Pairing::SwapInner => 1,
            Pairing::SwapOuter => 2,
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pairing::Keep => "keep",
            Pairing::SwapInner => "swap-inner",
            Pairing::SwapOuter => "swap-outer",
        };
        f.write_str(s)
    }
}

/// Loop-free graph of degree-3 internal nodes and degree-1 leaves, with a
/// designated root edge and per-edge update ages.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeTopology {
    n: usize,
    adj: Vec<Vec<NodeId>>,
    root_edge: Edge,
    edge_age: BTreeMap<Edge, u64>,
}

impl TreeTopology {
    /// Builds a topology from explicit edges. Used by constructors and the
    /// model loader; validates all structural invariants.
    pub fn from_edges(n: usize, edges: &[Edge], root_edge: Edge) -> Result<Self, TopologyError> {
        if n < 3 {
            return Err(TopologyError::TooFewLeaves(n));
        }
        let node_count = 2 * n - 2;
        let mut adj = vec![Vec::new(); node_count];
        for e in edges {
            let (a, b) = e.endpoints();
            if a as usize >= node_count || b as usize >= node_count || a == b {
                return Err(TopologyError::InvariantViolated(format!(
                    "edge {e} out of range for {n} leaves"
                )));
            }
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        for nb in &mut adj {
            nb.sort_unstable();
        }
        let mut t = Self {
            n,
            adj,
            root_edge,
            edge_age: edges.iter().map(|&e| (e, 0)).collect(),
        };
        t.validate()?;
        t.edge_age = t.edges().into_iter().map(|e| (e, 0)).collect();
        Ok(t)
    }

    /// Caterpillar topology: a chain of internal nodes, each carrying one
    /// leaf, with the chain-end leaves attached directly to the first and
    /// last internal nodes.
    pub fn tensor_train(n: usize) -> Result<Self, TopologyError> {
        if n < 3 {
            return Err(TopologyError::TooFewLeaves(n));
        }
        let internal = |i: usize| (n + i) as NodeId;
        let mut edges = Vec::with_capacity(2 * n - 3);
        edges.push(Edge::new(0, internal(0)));
        for i in 0..n - 2 {
            edges.push(Edge::new((i + 1) as NodeId, internal(i)));
        }
        edges.push(Edge::new((n - 1) as NodeId, internal(n - 3)));
        for i in 0..n.saturating_sub(3) {
            edges.push(Edge::new(internal(i), internal(i + 1)));
        }
        let root = if n == 3 {
            Edge::new(0, internal(0))
        } else {
            let mid = (n - 3) / 2;
            Edge::new(internal(mid), internal(mid + 1))
        };
        Self::from_edges(n, &edges, root)
    }

    /// Depth-balanced topology; leaf depths differ by at most one.
    pub fn balanced(n: usize) -> Result<Self, TopologyError> {
        if n < 3 {
            return Err(TopologyError::TooFewLeaves(n));
        }
        let mut edges = Vec::with_capacity(2 * n - 3);
        let mut next_internal = n as NodeId;
        // Builds the subtree over leaves [lo, hi) and returns its top node.
        fn build(
            lo: usize,
            hi: usize,
            next: &mut NodeId,
            edges: &mut Vec<Edge>,
        ) -> NodeId {
            let size = hi - lo;
            if size == 1 {
                return lo as NodeId;
            }
            let node = *next;
            *next += 1;
            let mid = lo + size.div_ceil(2);
            let left = build(lo, mid, next, edges);
            let right = build(mid, hi, next, edges);
            edges.push(Edge::new(left, node));
            edges.push(Edge::new(right, node));
            node
        }
        let mid = n.div_ceil(2);
        let left = build(0, mid, &mut next_internal, &mut edges);
        let right = build(mid, n, &mut next_internal, &mut edges);
        edges.push(Edge::new(left, right));
        Self::from_edges(n, &edges, Edge::new(left, right))
    }

    /// Random topology built by repeatedly merging two uniformly chosen
    /// subtrees under a new node. The final degree-2 merge node is
    /// suppressed by joining the last two subtree roots directly; that
    /// joining edge becomes the root edge. Deterministic for a fixed seed.
    pub fn random(n: usize, seed: u64) -> Result<Self, TopologyError> {
        if n < 3 {
            return Err(TopologyError::TooFewLeaves(n));
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let mut roots: Vec<NodeId> = (0..n as NodeId).collect();
        let mut edges = Vec::with_capacity(2 * n - 3);
        let mut next_internal = n as NodeId;
        while roots.len() > 2 {
            let i = rng.gen_range(0..roots.len());
            let a = roots.swap_remove(i);
            let j = rng.gen_range(0..roots.len());
            let b = roots.swap_remove(j);
            let node = next_internal;
            next_internal += 1;
            edges.push(Edge::new(a, node));
            edges.push(Edge::new(b, node));
            roots.push(node);
        }
        let root = Edge::new(roots[0], roots[1]);
        edges.push(root);
        Self::from_edges(n, &edges, root)
    }

    pub fn leaf_count(&self) -> usize {
        self.n
    }

    pub fn node_count(&self) -> usize {
        2 * self.n - 2
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        (node as usize) < self.n
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        0..self.n as NodeId
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.n as NodeId..self.node_count() as NodeId
    }

    pub fn neighbors(&self, node: NodeId) -> &[NodeId] {
        &self.adj[node as usize]
    }

    pub fn incident_edges(&self, node: NodeId) -> Vec<Edge> {
        self.adj[node as usize]
            .iter()
            .map(|&nb| Edge::new(node, nb))
            .collect()
    }

    /// All edges in ascending order.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::with_capacity(2 * self.n - 3);
        for (a, nbs) in self.adj.iter().enumerate() {
            for &b in nbs {
                if (a as NodeId) < b {
                    out.push(Edge(a as NodeId, b));
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn has_edge(&self, e: Edge) -> bool {
        let (a, b) = e.endpoints();
        (a as usize) < self.adj.len() && self.adj[a as usize].contains(&b)
    }

    pub fn is_leaf_edge(&self, e: Edge) -> bool {
        let (a, b) = e.endpoints();
        self.is_leaf(a) || self.is_leaf(b)
    }

    /// Edges joining two internal nodes; these are the reconnection targets.
    pub fn virtual_bonds(&self) -> Vec<Edge> {
        self.edges()
            .into_iter()
            .filter(|e| !self.is_leaf_edge(*e))
            .collect()
    }

    pub fn root_edge(&self) -> Edge {
        self.root_edge
    }

    pub fn set_root_edge(&mut self, e: Edge) -> Result<(), TopologyError> {
        if !self.has_edge(e) {
            return Err(TopologyError::UnknownEdge(e));
        }
        self.root_edge = e;
        Ok(())
    }

    pub fn edge_age(&self, e: Edge) -> Option<u64> {
        self.edge_age.get(&e).copied()
    }

    pub fn edge_ages(&self) -> &BTreeMap<Edge, u64> {
        &self.edge_age
    }

    pub fn set_edge_age(&mut self, e: Edge, age: u64) {
        self.edge_age.insert(e, age);
    }

    /// Checks connectivity, acyclicity, degree constraints and counts.
    pub fn validate(&self) -> Result<(), TopologyError> {
        let node_count = self.node_count();
        let mut edge_count = 0usize;
        for (id, nbs) in self.adj.iter().enumerate() {
            let want = if id < self.n { 1 } else { 3 };
            if nbs.len() != want {
                return Err(TopologyError::InvariantViolated(format!(
                    "node {id} has degree {}, expected {want}",
                    nbs.len()
                )));
            }
            for w in nbs.windows(2) {
                if w[0] == w[1] {
                    return Err(TopologyError::InvariantViolated(format!(
                        "parallel edge at node {id}"
                    )));
                }
            }
            edge_count += nbs.len();
        }
        edge_count /= 2;
        if edge_count != node_count - 1 {
            return Err(TopologyError::InvariantViolated(format!(
                "{edge_count} edges for {node_count} nodes"
            )));
        }
        // connectivity; acyclicity then follows from the edge count
        let mut seen = vec![false; node_count];
        let mut queue = VecDeque::from([0 as NodeId]);
        seen[0] = true;
        let mut visited = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &self.adj[v as usize] {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    visited += 1;
                    queue.push_back(w);
                }
            }
        }
        if visited != node_count {
            return Err(TopologyError::InvariantViolated(format!(
                "graph not connected: reached {visited} of {node_count} nodes"
            )));
        }
        if !self.has_edge(self.root_edge) {
            return Err(TopologyError::InvariantViolated(format!(
                "root edge {} not in topology",
                self.root_edge
            )));
        }
        Ok(())
    }

    /// Splits the variables into the two groups created by cutting `e`.
    /// The first group is the component containing the smaller endpoint.
    pub fn bipartition(&self, e: Edge) -> Result<(BTreeSet<u32>, BTreeSet<u32>), TopologyError> {
        if !self.has_edge(e) {
            return Err(TopologyError::UnknownEdge(e));
        }
        let (a, b) = e.endpoints();
        let side_a = self.component_leaves(a, e);
        let side_b: BTreeSet<u32> = self
            .leaves()
            .filter(|leaf| !side_a.contains(leaf))
            .collect();
        debug_assert!(side_a.len() + side_b.len() == self.n);
        debug_assert!(self.is_leaf(b) || !side_b.is_empty());
        Ok((side_a, side_b))
    }

    /// Leaves reachable from `start` without crossing `blocked`.
    fn component_leaves(&self, start: NodeId, blocked: Edge) -> BTreeSet<u32> {
        let mut seen = vec![false; self.node_count()];
        let mut out = BTreeSet::new();
        let mut stack = vec![start];
        seen[start as usize] = true;
        while let Some(v) = stack.pop() {
            if self.is_leaf(v) {
                out.insert(v);
            }
            for &w in &self.adj[v as usize] {
                if Edge::new(v, w) == blocked || seen[w as usize] {
                    continue;
                }
                seen[w as usize] = true;
                stack.push(w);
            }
        }
        out
    }

    /// The four outward legs of the two root-edge nodes: the two non-root
    /// neighbors of the smaller endpoint (ascending), then the larger's.
    pub fn root_outer_legs(&self) -> Result<[Edge; 4], TopologyError> {
        let (u, v) = self.root_edge.endpoints();
        if self.is_leaf(u) || self.is_leaf(v) {
            return Err(TopologyError::InvariantViolated(format!(
                "root edge {} touches a leaf; no four-leg regrouping exists",
                self.root_edge
            )));
        }
        let mut out = [Edge::new(0, 1); 4];
        let mut k = 0;
        for &nb in &self.adj[u as usize] {
            if nb != v {
                out[k] = Edge::new(u, nb);
                k += 1;
            }
        }
        for &nb in &self.adj[v as usize] {
            if nb != u {
                out[k] = Edge::new(v, nb);
                k += 1;
            }
        }
        debug_assert_eq!(k, 4);
        Ok(out)
    }

    /// Regroups the four subtrees hanging off the root edge according to
    /// `p`, marks the root edge as updated at `iteration`, and preserves
    /// the ages of the two migrated edges.
    pub fn apply_pairing(&self, p: Pairing, iteration: u64) -> Result<Self, TopologyError> {
        let mut t = self.clone();
        t.apply_pairing_in_place(p, iteration)?;
        Ok(t)
    }

    pub(crate) fn apply_pairing_in_place(
        &mut self,
        p: Pairing,
        iteration: u64,
    ) -> Result<(), TopologyError> {
        let legs = self.root_outer_legs()?;
        let (u, v) = self.root_edge.endpoints();
        let [_a0, a1, b0, b1] = legs.map(|e| {
            if e.contains(u) {
                e.other(u)
            } else {
                e.other(v)
            }
        });
        match p {
            Pairing::Keep => {}
            Pairing::SwapInner => {
                // u keeps a0 and gains b0; v keeps b1 and gains a1
                self.migrate(a1, u, v);
                self.migrate(b0, v, u);
            }
            Pairing::SwapOuter => {
                self.migrate(a1, u, v);
                self.migrate(b1, v, u);
            }
        }
        self.edge_age.insert(self.root_edge, iteration);
        debug_assert!(self.validate().is_ok());
        Ok(())
    }

    /// Moves the subtree rooted at `child` from `from` to `to`, carrying
    /// the edge age with it.
    fn migrate(&mut self, child: NodeId, from: NodeId, to: NodeId) {
        let age = self.edge_age.remove(&Edge::new(child, from)).unwrap_or(0);
        self.adj[from as usize].retain(|&x| x != child);
        self.adj[child as usize].retain(|&x| x != from);
        self.adj[to as usize].push(child);
        self.adj[child as usize].push(to);
        self.adj[to as usize].sort_unstable();
        self.adj[child as usize].sort_unstable();
        self.edge_age.insert(Edge::new(child, to), age);
    }

    /// Tree centroid: the node whose largest remaining component (in node
    /// count) is smallest; ties broken by the smaller node id.
    pub fn centroid(&self) -> NodeId {
        let total = self.node_count();
        let mut subtree = vec![0usize; total];
        // iterative postorder from node 0
        let mut order = Vec::with_capacity(total);
        let mut parent = vec![u32::MAX; total];
        let mut stack = vec![0 as NodeId];
        let mut seen = vec![false; total];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            order.push(v);
            for &w in &self.adj[v as usize] {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    parent[w as usize] = v;
                    stack.push(w);
                }
            }
        }
        for &v in order.iter().rev() {
            subtree[v as usize] += 1;
            let p = parent[v as usize];
            if p != u32::MAX {
                subtree[p as usize] += subtree[v as usize];
            }
        }
        let mut best = (usize::MAX, 0 as NodeId);
        for v in 0..total as NodeId {
            let mut largest = total - subtree[v as usize];
            for &w in &self.adj[v as usize] {
                if parent[w as usize] == v {
                    largest = largest.max(subtree[w as usize]);
                }
            }
            if largest < best.0 {
                best = (largest, v);
            }
        }
        best.1
    }

    /// Graph center: node of minimum eccentricity, ties to the smaller id.
    pub fn graph_center(&self) -> NodeId {
        let mut best = (usize::MAX, 0 as NodeId);
        for v in 0..self.node_count() as NodeId {
            let ecc = *self.distances_from(v).iter().max().unwrap();
            if ecc < best.0 {
                best = (ecc, v);
            }
        }
        best.1
    }

    fn distances_from(&self, start: NodeId) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.node_count()];
        dist[start as usize] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &w in &self.adj[v as usize] {
                if dist[w as usize] == usize::MAX {
                    dist[w as usize] = dist[v as usize] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Dense ranking of variables by edge-count distance from the center.
    pub fn center_distance_ranking(&self, mode: CenterMode) -> BTreeMap<u32, usize> {
        let center = match mode {
            CenterMode::Centroid => self.centroid(),
            CenterMode::GraphCenter => self.graph_center(),
        };
        let dist = self.distances_from(center);
        let mut leaf_dists: Vec<usize> = self.leaves().map(|l| dist[l as usize]).collect();
        leaf_dists.sort_unstable();
        leaf_dists.dedup();
        self.leaves()
            .map(|l| {
                let d = dist[l as usize];
                let rank = leaf_dists.binary_search(&d).unwrap() + 1;
                (l, rank)
            })
            .collect()
    }

    /// Renders the tree in DOT. Edge colors ramp linearly from blue (the
    /// smallest BMI present) to purple (the largest); each edge with a
    /// known BMI also carries it as a `bmi` attribute. Leaves show their
    /// variable index, or the provided label; labels starting with `#` are
    /// used as fill colors instead.
    pub fn to_dot(
        &self,
        bmi: &BTreeMap<Edge, f64>,
        labels: Option<&BTreeMap<u32, String>>,
    ) -> String {
        let (lo, hi) = bmi
            .values()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let mut out = String::from("graph tensor_tree {\n");
        out.push_str("  node [shape=circle, fontsize=10];\n");
        for leaf in self.leaves() {
            let label = labels.and_then(|m| m.get(&leaf));
            match label {
                Some(s) if s.starts_with('#') => out.push_str(&format!(
                    "  x{leaf} [label=\"{leaf}\", style=filled, fillcolor=\"{s}\"];\n"
                )),
                Some(s) => out.push_str(&format!("  x{leaf} [label=\"{}\"];\n", escape(s))),
                None => out.push_str(&format!("  x{leaf} [label=\"{leaf}\"];\n")),
            }
        }
        for node in self.internal_nodes() {
            out.push_str(&format!("  t{node} [shape=point];\n"));
        }
        let name = |id: NodeId| {
            if self.is_leaf(id) {
                format!("x{id}")
            } else {
                format!("t{id}")
            }
        };
        for e in self.edges() {
            let (a, b) = e.endpoints();
            match bmi.get(&e) {
                Some(&v) => {
                    let t = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
                    let color = ramp_color(t);
                    out.push_str(&format!(
                        "  {} -- {} [color=\"{color}\", penwidth={:.2}, bmi={:.6}];\n",
                        name(a),
                        name(b),
                        1.0 + 2.0 * t,
                        v
                    ));
                }
                None => out.push_str(&format!("  {} -- {};\n", name(a), name(b))),
            }
        }
        out.push_str("}\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Linear blue-to-purple ramp; `t` in [0, 1], 1 is the hot (purple) end.
fn ramp_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (128.0 * t).round() as u8;
    let g = 0u8;
    let b = (255.0 + (128.0 - 255.0) * t).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Which notion of tree center `center_distance_ranking` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterMode {
    /// Node minimizing the size of its largest remaining component.
    Centroid,
    /// Node of minimum eccentricity.
    GraphCenter,
}
