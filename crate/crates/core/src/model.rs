//! The Born machine: a tensor tree in canonical form.
//!
//! The model keeps one 3-leg tensor per internal node and a diagonal central
//! weight on the root edge. Every tensor is an isometry directed toward the
//! root, so the partition function collapses to the squared norm of the
//! central weight and truncations at the root are globally optimal. When the
//! root edge is a leaf edge (possible for n = 3 and during root walks), the
//! leaf side of the weight is a small 2 x r isometry stored separately.
//!
//! Amplitudes are evaluated with per-node rescaling and accumulated log
//! scales, so configurations of a thousand variables do not underflow.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::batch::DataBatch;
use crate::error::ModelError;
use crate::tensor::{contract, svd_raw, DenseTensor};
use crate::topology::{Edge, NodeId, TreeTopology};

/// Relative threshold below which singular values are treated as zero.
pub(crate) const SV_REL_EPS: f64 = 1e-14;

/// A node tensor together with the edge each axis belongs to.
/// `legs` is kept sorted; axis `i` of `tensor` runs over edge `legs[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTensor {
    pub legs: Vec<Edge>,
    pub tensor: DenseTensor,
}

impl NodeTensor {
    pub(crate) fn axis_of(&self, leg: Edge) -> usize {
        self.legs
            .iter()
            .position(|&e| e == leg)
            .expect("leg not present on node tensor")
    }

    /// Extent of the axis associated with `leg`.
    pub(crate) fn dim_of(&self, leg: Edge) -> usize {
        self.tensor.shape()[self.axis_of(leg)]
    }

    /// Contracts `m` (shape `[new_dim, old_dim]`) into the axis of `leg`,
    /// keeping the axis order intact.
    pub(crate) fn contract_into_leg(&mut self, leg: Edge, m: &DenseTensor) {
        let axis = self.axis_of(leg);
        let rank = self.legs.len();
        let t = contract(m, &self.tensor, &[(1, axis)]).expect("leg contraction");
        // the contracted axis moved to the front; put it back
        let perm: Vec<usize> = (0..rank)
            .map(|i| {
                if i == axis {
                    0
                } else if i < axis {
                    i + 1
                } else {
                    i
                }
            })
            .collect();
        self.tensor = t.permute(&perm);
    }

    /// Points an axis at a new edge (after a rewire moved the subtree),
    /// restoring sorted leg order.
    pub(crate) fn rename_leg(&mut self, old: Edge, new: Edge) {
        let axis = self.axis_of(old);
        self.legs[axis] = new;
        let mut order: Vec<usize> = (0..self.legs.len()).collect();
        order.sort_by_key(|&i| self.legs[i]);
        if order.iter().enumerate().any(|(i, &p)| i != p) {
            self.tensor = self.tensor.permute(&order);
            self.legs = order.iter().map(|&i| self.legs[i]).collect();
        }
    }

    /// Matricizes the tensor as (all other axes) x (axis of `leg`).
    /// Returns the matrix and the other legs in their original order.
    pub(crate) fn unfold_toward(&self, leg: Edge) -> (DenseTensor, Vec<Edge>) {
        let axis = self.axis_of(leg);
        let rank = self.legs.len();
        let mut perm: Vec<usize> = (0..rank).filter(|&i| i != axis).collect();
        let others: Vec<Edge> = perm.iter().map(|&i| self.legs[i]).collect();
        perm.push(axis);
        let shape = self.tensor.shape();
        let rows: usize = others
            .iter()
            .enumerate()
            .map(|(k, _)| shape[perm[k]])
            .product();
        let cols = shape[axis];
        let m = self
            .tensor
            .permute(&perm)
            .reshape(vec![rows, cols])
            .expect("unfold reshape");
        (m, others)
    }

    /// Rebuilds the tensor from an unfolded matrix `(others x new_dim)`,
    /// restoring sorted axis order.
    pub(crate) fn refold_from(&mut self, leg: Edge, others: &[Edge], m: DenseTensor, dims: &[usize]) {
        let axis = self.axis_of(leg);
        let rank = self.legs.len();
        let new_dim = m.shape()[1];
        let mut shape: Vec<usize> = dims.to_vec();
        shape.push(new_dim);
        let t = m.reshape(shape).expect("refold reshape");
        // axes are [others..., leg]; restore original order
        let perm: Vec<usize> = (0..rank)
            .map(|i| {
                if i == axis {
                    rank - 1
                } else {
                    let pos = others
                        .iter()
                        .position(|&e| e == self.legs[i])
                        .expect("missing leg");
                    pos
                }
            })
            .collect();
        self.tensor = t.permute(&perm);
    }
}

/// Orientation of the tree toward the root edge.
#[derive(Debug, Clone)]
pub(crate) struct Orientation {
    /// For every node, the first edge on its path to the root edge.
    pub parent_edge: Vec<Edge>,
    /// Internal nodes, children strictly before parents.
    pub postorder: Vec<NodeId>,
}

pub(crate) fn orient(topo: &TreeTopology) -> Orientation {
    let count = topo.node_count();
    let root = topo.root_edge();
    let (x, y) = root.endpoints();
    let mut parent_edge = vec![root; count];
    let mut seen = vec![false; count];
    seen[x as usize] = true;
    seen[y as usize] = true;
    let mut bfs: Vec<NodeId> = Vec::with_capacity(count);
    if !topo.is_leaf(x) {
        bfs.push(x);
    }
    if !topo.is_leaf(y) {
        bfs.push(y);
    }
    let mut head = 0;
    let mut level: Vec<NodeId> = bfs.clone();
    while head < level.len() {
        let v = level[head];
        head += 1;
        for &w in topo.neighbors(v) {
            if !seen[w as usize] {
                seen[w as usize] = true;
                parent_edge[w as usize] = Edge::new(w, v);
                level.push(w);
                if !topo.is_leaf(w) {
                    bfs.push(w);
                }
            }
        }
    }
    bfs.reverse();
    Orientation {
        parent_edge,
        postorder: bfs,
    }
}

/// Tensor tree Born machine in canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorTreeModel {
    pub(crate) topology: TreeTopology,
    pub(crate) tensors: BTreeMap<NodeId, NodeTensor>,
    pub(crate) lambda: Vec<f64>,
    /// Present exactly when the root edge is a leaf edge: the 2 x r isometry
    /// that connects the physical index of the root leaf to the weight.
    pub(crate) root_leaf_isometry: Option<DenseTensor>,
    pub(crate) chi: usize,
}

impl TensorTreeModel {
    /// Random Gaussian initialization, canonicalized toward the topology's
    /// root edge and normalized to unit partition function.
    pub fn init(topology: TreeTopology, chi: usize, seed: u64) -> Result<Self, ModelError> {
        if chi < 2 {
            return Err(ModelError::ChiTooSmall(chi));
        }
        topology.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for node in topology.internal_nodes() {
            let legs = topology.incident_edges(node);
            let dims: Vec<usize> = legs
                .iter()
                .map(|e| if topology.is_leaf_edge(*e) { 2 } else { chi })
                .collect();
            let tensor = DenseTensor::random_gaussian(dims, &mut rng);
            tensors.insert(node, NodeTensor { legs, tensor });
        }
        let root = topology.root_edge();
        let mut model = Self {
            topology,
            tensors,
            lambda: Vec::new(),
            root_leaf_isometry: None,
            chi,
        };
        model.canonicalize(root)?;
        model.normalize();
        Ok(model)
    }

    /// Builds the model whose wave function is the weighted superposition of
    /// the given binary patterns. Needs `chi` at least the pattern count.
    pub fn from_pattern_superposition(
        topology: TreeTopology,
        patterns: &DataBatch,
        weights: &[f64],
        chi: usize,
    ) -> Result<Self, ModelError> {
        if chi < 2 {
            return Err(ModelError::ChiTooSmall(chi));
        }
        topology.validate()?;
        let p = patterns.len();
        if weights.len() != p {
            return Err(ModelError::WrongLength {
                expected: p,
                got: weights.len(),
            });
        }
        if patterns.n() != topology.leaf_count() {
            return Err(ModelError::WrongLength {
                expected: topology.leaf_count(),
                got: patterns.n(),
            });
        }
        if chi < p {
            return Err(ModelError::InsufficientRank { needed: p, chi });
        }
        let root = topology.root_edge();
        let (rx, ry) = root.endpoints();
        let designated = if topology.is_leaf(rx) { ry } else { rx };
        let mut tensors = BTreeMap::new();
        for node in topology.internal_nodes() {
            let legs = topology.incident_edges(node);
            let dims: Vec<usize> = legs
                .iter()
                .map(|e| if topology.is_leaf_edge(*e) { 2 } else { p })
                .collect();
            let mut t = DenseTensor::zeros(dims.clone());
            let strides: Vec<usize> = {
                let mut s = vec![1usize; dims.len()];
                for i in (0..dims.len().saturating_sub(1)).rev() {
                    s[i] = s[i + 1] * dims[i + 1];
                }
                s
            };
            for pat in 0..p {
                let mut idx = 0usize;
                for (ax, leg) in legs.iter().enumerate() {
                    let coord = if topology.is_leaf_edge(*leg) {
                        let leaf = {
                            let (a, b) = leg.endpoints();
                            if topology.is_leaf(a) {
                                a
                            } else {
                                b
                            }
                        };
                        patterns.row(pat)[leaf as usize] as usize
                    } else {
                        pat
                    };
                    idx += coord * strides[ax];
                }
                let w = if node == designated { weights[pat] } else { 1.0 };
                t.data_mut()[idx] += w;
            }
            tensors.insert(node, NodeTensor { legs, tensor: t });
        }
        let mut model = Self {
            topology,
            tensors,
            lambda: Vec::new(),
            root_leaf_isometry: None,
            chi,
        };
        model.canonicalize(root)?;
        model.normalize();
        Ok(model)
    }

    pub fn topology(&self) -> &TreeTopology {
        &self.topology
    }

    pub fn n(&self) -> usize {
        self.topology.leaf_count()
    }

    pub fn chi(&self) -> usize {
        self.chi
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn root_edge(&self) -> Edge {
        self.topology.root_edge()
    }

    pub fn node_tensor(&self, node: NodeId) -> Option<&NodeTensor> {
        self.tensors.get(&node)
    }

    pub fn root_leaf_isometry(&self) -> Option<&DenseTensor> {
        self.root_leaf_isometry.as_ref()
    }

    /// Partition function, `sum of lambda^2` by canonical form.
    pub fn z(&self) -> f64 {
        self.lambda.iter().map(|l| l * l).sum()
    }

    /// Root-facing edge of each internal node.
    pub fn isometry_directions(&self) -> BTreeMap<NodeId, Edge> {
        let o = orient(&self.topology);
        self.topology
            .internal_nodes()
            .map(|v| (v, o.parent_edge[v as usize]))
            .collect()
    }

    /// Rescales the central weight so that Z = 1. Scales by the leading
    /// entry first so extreme magnitudes cannot underflow the sum.
    pub fn normalize(&mut self) {
        let lead = self.lambda.first().copied().unwrap_or(0.0);
        if lead > 0.0 {
            for l in &mut self.lambda {
                *l /= lead;
            }
            let z = self.z();
            let s = 1.0 / z.sqrt();
            for l in &mut self.lambda {
                *l *= s;
            }
        }
    }

    /// Re-derives the canonical form with the weight on `root`. The
    /// represented wave function is unchanged up to floating-point error.
    pub fn canonicalize(&mut self, root: Edge) -> Result<(), ModelError> {
        if !self.topology.has_edge(root) {
            return Err(ModelError::Topology(
                crate::error::TopologyError::UnknownEdge(root),
            ));
        }
        // a previously canonical model keeps its weight outside the node
        // tensors; fold it back in so the tensors carry the full state
        if !self.lambda.is_empty() {
            let old_root = self.topology.root_edge();
            let (oa, ob) = old_root.endpoints();
            let pivot = if self.topology.is_leaf(oa) { ob } else { oa };
            let r = self.lambda.len();
            let absorb = match self.root_leaf_isometry.take() {
                Some(p) => {
                    let mut m = p;
                    for row in 0..2 {
                        for k in 0..r {
                            m.data_mut()[row * r + k] *= self.lambda[k];
                        }
                    }
                    m
                }
                None => {
                    let mut m = DenseTensor::zeros(vec![r, r]);
                    for i in 0..r {
                        m.data_mut()[i * r + i] = self.lambda[i];
                    }
                    m
                }
            };
            self.tensors
                .get_mut(&pivot)
                .unwrap()
                .contract_into_leg(old_root, &absorb);
            self.lambda.clear();
        }
        self.topology.set_root_edge(root)?;
        self.root_leaf_isometry = None;
        let o = orient(&self.topology);
        let (rx, ry) = root.endpoints();
        let mut stash: BTreeMap<NodeId, DenseTensor> = BTreeMap::new();
        // weights are rescaled node by node so a thousand absorptions
        // cannot overflow; the accumulated scale is restored into the
        // central weight at the end
        let mut log_scale = 0.0f64;
        for &w in &o.postorder {
            let parent = o.parent_edge[w as usize];
            let (m, others) = self.tensors[&w].unfold_toward(parent);
            let dims: Vec<usize> = {
                let nt = &self.tensors[&w];
                others.iter().map(|&e| nt.dim_of(e)).collect()
            };
            let (u, mut s, v) = thin_svd_dropping_zeros(&m)?;
            let k = s.len();
            if k == 0 || s[0] <= 0.0 {
                return Err(ModelError::DegenerateModel);
            }
            log_scale += s[0].ln();
            let inv = 1.0 / s[0];
            for x in &mut s {
                *x *= inv;
            }
            {
                let nt = self.tensors.get_mut(&w).unwrap();
                nt.refold_from(parent, &others, u, &dims);
            }
            // r = diag(s) * v^T, mapping the old parent extent to k
            let dp = v.shape()[0];
            let mut r = vec![0.0; k * dp];
            for i in 0..dp {
                for j in 0..k {
                    r[j * dp + i] = s[j] * v.data()[i * k + j];
                }
            }
            let r = DenseTensor::new(vec![k, dp], r).expect("r shape");
            if parent == root {
                stash.insert(w, r);
            } else {
                let up = parent.other(w);
                self.tensors
                    .get_mut(&up)
                    .unwrap()
                    .contract_into_leg(parent, &r);
            }
        }
        let take = |stash: &mut BTreeMap<NodeId, DenseTensor>, node: NodeId| -> DenseTensor {
            stash.remove(&node).unwrap_or_else(|| {
                // leaf endpoint contributes an identity on the physical index
                let mut id = DenseTensor::zeros(vec![2, 2]);
                id.data_mut()[0] = 1.0;
                id.data_mut()[3] = 1.0;
                id
            })
        };
        let r_x = take(&mut stash, rx);
        let r_y = take(&mut stash, ry);
        // central matrix on the root edge
        let c = contract(&r_x, &r_y, &[(1, 1)]).expect("central contraction");
        let (p, mut lam, q) = thin_svd_dropping_zeros(&c)?;
        if lam.is_empty() || lam[0] <= 0.0 {
            return Err(ModelError::DegenerateModel);
        }
        // restore the accumulated scale, saturating when the true norm is
        // not representable (the state is unchanged projectively); the
        // bound keeps every weight entry in the normal f64 range
        let restore = log_scale.clamp(-300.0, 300.0).exp();
        for l in &mut lam {
            *l *= restore;
        }
        if self.topology.is_leaf(rx) {
            self.root_leaf_isometry = Some(p);
        } else {
            let m = transpose(&p);
            self.tensors
                .get_mut(&rx)
                .unwrap()
                .contract_into_leg(root, &m);
        }
        // ry is internal whenever the topology is valid (n >= 3)
        let m = transpose(&q);
        self.tensors
            .get_mut(&ry)
            .unwrap()
            .contract_into_leg(root, &m);
        self.lambda = lam;
        Ok(())
    }

    /// Moves the root to an adjacent edge by one SVD, preserving amplitudes.
    pub fn move_root(&mut self, target: Edge) -> Result<(), ModelError> {
        let root = self.topology.root_edge();
        if target == root {
            return Ok(());
        }
        if !self.topology.has_edge(target) {
            return Err(ModelError::Topology(
                crate::error::TopologyError::UnknownEdge(target),
            ));
        }
        let (ra, rb) = root.endpoints();
        let pivot = if target.contains(ra) && !self.topology.is_leaf(ra) {
            ra
        } else if target.contains(rb) && !self.topology.is_leaf(rb) {
            rb
        } else {
            return Err(ModelError::NonAdjacentTarget(target, root));
        };

        // absorb the central weight into the pivot tensor
        let oldroot_other = root.other(pivot);
        let r = self.lambda.len();
        let absorb = if self.topology.is_leaf(oldroot_other) {
            let p = self
                .root_leaf_isometry
                .take()
                .expect("root on leaf edge must carry a leaf isometry");
            // m[s, k] = p[s, k] * lambda[k]
            let mut m = p.clone();
            let k = m.shape()[1];
            for row in 0..m.shape()[0] {
                for col in 0..k {
                    m.data_mut()[row * k + col] *= self.lambda[col];
                }
            }
            m
        } else {
            let mut m = DenseTensor::zeros(vec![r, r]);
            for i in 0..r {
                m.data_mut()[i * r + i] = self.lambda[i];
            }
            m
        };
        self.tensors
            .get_mut(&pivot)
            .unwrap()
            .contract_into_leg(root, &absorb);

        // split the pivot toward the target edge
        let (m, others) = self.tensors[&pivot].unfold_toward(target);
        let dims: Vec<usize> = {
            let nt = &self.tensors[&pivot];
            others.iter().map(|&e| nt.dim_of(e)).collect()
        };
        let (u, s, v) = thin_svd_dropping_zeros(&m)?;
        if s.is_empty() {
            return Err(ModelError::DegenerateModel);
        }
        {
            let nt = self.tensors.get_mut(&pivot).unwrap();
            nt.refold_from(target, &others, u, &dims);
        }
        self.lambda = s;
        let far = target.other(pivot);
        if self.topology.is_leaf(far) {
            self.root_leaf_isometry = Some(v);
        } else {
            let m = transpose(&v);
            self.tensors
                .get_mut(&far)
                .unwrap()
                .contract_into_leg(target, &m);
        }
        self.topology.set_root_edge(target)?;
        Ok(())
    }

    /// Moves the root to any edge, walking one adjacent step at a time.
    pub fn move_root_along_path(&mut self, target: Edge) -> Result<(), ModelError> {
        if !self.topology.has_edge(target) {
            return Err(ModelError::Topology(
                crate::error::TopologyError::UnknownEdge(target),
            ));
        }
        for e in self.edge_path_to(target) {
            self.move_root(e)?;
        }
        Ok(())
    }

    /// Sequence of edges from the current root to `target`, each adjacent
    /// to its predecessor.
    pub(crate) fn edge_path_to(&self, target: Edge) -> Vec<Edge> {
        let root = self.topology.root_edge();
        if root == target {
            return Vec::new();
        }
        // BFS over edges; two edges are adjacent when they share a node
        let count = self.topology.node_count();
        let mut parent: BTreeMap<Edge, Edge> = BTreeMap::new();
        let mut queue = std::collections::VecDeque::from([root]);
        let mut seen_nodes = vec![false; count];
        'outer: while let Some(e) = queue.pop_front() {
            for node in [e.endpoints().0, e.endpoints().1] {
                if seen_nodes[node as usize] || self.topology.is_leaf(node) {
                    continue;
                }
                seen_nodes[node as usize] = true;
                for next in self.topology.incident_edges(node) {
                    if next != e && !parent.contains_key(&next) && next != root {
                        parent.insert(next, e);
                        if next == target {
                            break 'outer;
                        }
                        queue.push_back(next);
                    }
                }
            }
        }
        let mut path = vec![target];
        let mut cur = target;
        while let Some(&p) = parent.get(&cur) {
            if p == root {
                break;
            }
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Wave function amplitude of one configuration.
    pub fn amplitude(&self, x: &[u8]) -> Result<f64, ModelError> {
        let (sign, ln) = self.log_amplitude(x)?;
        Ok(sign * ln.exp())
    }

    /// Returns `(sign, ln |amplitude|)`; the log is `-inf` for exact zeros.
    pub fn log_amplitude(&self, x: &[u8]) -> Result<(f64, f64), ModelError> {
        let n = self.n();
        if x.len() != n {
            return Err(ModelError::WrongLength {
                expected: n,
                got: x.len(),
            });
        }
        let o = orient(&self.topology);
        let mut vecs: BTreeMap<NodeId, (Vec<f64>, f64)> = BTreeMap::new();
        let leaf_vec = |leaf: NodeId| -> (Vec<f64>, f64) {
            let bit = x[leaf as usize] as usize;
            let mut v = vec![0.0, 0.0];
            v[bit] = 1.0;
            (v, 0.0)
        };
        for &w in &o.postorder {
            let nt = &self.tensors[&w];
            let parent = o.parent_edge[w as usize];
            let (m, others) = nt.unfold_toward(parent);
            // incoming vectors for the two child legs, in `others` order
            let mut incoming: Vec<(Vec<f64>, f64)> = Vec::with_capacity(2);
            for &leg in &others {
                let child = {
                    let (a, b) = leg.endpoints();
                    if a == w {
                        b
                    } else {
                        a
                    }
                };
                if self.topology.is_leaf(child) {
                    incoming.push(leaf_vec(child));
                } else {
                    incoming.push(vecs.remove(&child).expect("postorder child"));
                }
            }
            let d0 = incoming[0].0.len();
            let d1 = incoming[1].0.len();
            let dp = m.shape()[1];
            debug_assert_eq!(m.shape()[0], d0 * d1);
            let mut out = vec![0.0f64; dp];
            for (a, &va) in incoming[0].0.iter().enumerate() {
                if va == 0.0 {
                    continue;
                }
                for (b, &vb) in incoming[1].0.iter().enumerate() {
                    let w2 = va * vb;
                    if w2 == 0.0 {
                        continue;
                    }
                    let base = (a * d1 + b) * dp;
                    for p in 0..dp {
                        out[p] += w2 * m.data()[base + p];
                    }
                }
            }
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ls = incoming[0].1 + incoming[1].1;
            if norm == 0.0 {
                return Ok((1.0, f64::NEG_INFINITY));
            }
            for v in &mut out {
                *v /= norm;
            }
            vecs.insert(w, (out, ls + norm.ln()));
        }
        let root = self.topology.root_edge();
        let (rx, ry) = root.endpoints();
        let side = |node: NodeId, vecs: &mut BTreeMap<NodeId, (Vec<f64>, f64)>| {
            if self.topology.is_leaf(node) {
                let p = self
                    .root_leaf_isometry
                    .as_ref()
                    .expect("leaf root edge requires leaf isometry");
                let k = p.shape()[1];
                let bit = x[node as usize] as usize;
                let v: Vec<f64> = (0..k).map(|j| p.data()[bit * k + j]).collect();
                (v, 0.0)
            } else {
                vecs.remove(&node).expect("root side vector")
            }
        };
        let (va, lsa) = side(rx, &mut vecs);
        let (vb, lsb) = side(ry, &mut vecs);
        let mut amp = 0.0;
        for k in 0..self.lambda.len() {
            amp += va[k] * self.lambda[k] * vb[k];
        }
        if amp == 0.0 {
            return Ok((1.0, f64::NEG_INFINITY));
        }
        Ok((amp.signum(), amp.abs().ln() + lsa + lsb))
    }

    /// `ln p(x) = 2 ln |amplitude| - ln Z`; `-inf` when the amplitude is 0.
    pub fn log_prob(&self, x: &[u8]) -> Result<f64, ModelError> {
        let (_, ln) = self.log_amplitude(x)?;
        Ok(2.0 * ln - self.z().ln())
    }

    /// Mean negative log-likelihood over the batch, `+inf` if any sample
    /// has zero probability.
    pub fn nll(&self, batch: &DataBatch) -> Result<f64, ModelError> {
        let logs = crate::grad::batch_log_probs(self, batch)?;
        let mut acc = 0.0;
        for lp in logs {
            if lp == f64::NEG_INFINITY {
                return Ok(f64::INFINITY);
            }
            acc -= lp;
        }
        Ok(acc / batch.len() as f64)
    }

    /// Probability of every configuration, indexed so that variable `i` is
    /// bit `n-1-i` of the index. Guarded to small n.
    pub fn enumerate_probabilities(&self, max_n: usize) -> Result<Vec<f64>, ModelError> {
        let n = self.n();
        if n > max_n {
            return Err(ModelError::EnumerationGuard { n, max: max_n });
        }
        let z = self.z();
        let total = 1usize << n;
        let mut out = Vec::with_capacity(total);
        let mut x = vec![0u8; n];
        for k in 0..total {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = ((k >> (n - 1 - i)) & 1) as u8;
            }
            let (_, ln) = self.log_amplitude(&x)?;
            out.push(if ln == f64::NEG_INFINITY {
                0.0
            } else {
                (2.0 * ln - z.ln()).exp()
            });
        }
        Ok(out)
    }

    /// Checks the canonical-form invariants: every tensor an isometry
    /// toward the root, positive non-increasing weights, extents within
    /// bounds.
    pub fn verify_canonical(&self, tol: f64) -> Result<(), ModelError> {
        let o = orient(&self.topology);
        for (&w, nt) in &self.tensors {
            let parent = o.parent_edge[w as usize];
            let (m, _) = nt.unfold_toward(parent);
            check_isometry(&m, tol).map_err(|msg| {
                ModelError::CanonicalViolation(format!("node {w} toward {parent}: {msg}"))
            })?;
            for (ax, leg) in nt.legs.iter().enumerate() {
                let d = nt.tensor.shape()[ax];
                let bound = if self.topology.is_leaf_edge(*leg) && *leg != self.root_edge() {
                    2
                } else {
                    self.chi.max(2)
                };
                if d > bound {
                    return Err(ModelError::CanonicalViolation(format!(
                        "node {w} leg {leg} extent {d} exceeds {bound}"
                    )));
                }
            }
            if !nt.tensor.all_finite() {
                return Err(ModelError::CanonicalViolation(format!(
                    "node {w} has non-finite entries"
                )));
            }
        }
        if let Some(p) = &self.root_leaf_isometry {
            check_isometry(p, tol)
                .map_err(|msg| ModelError::CanonicalViolation(format!("leaf isometry: {msg}")))?;
        }
        if self.lambda.is_empty() || self.lambda.len() > self.chi.max(2) {
            return Err(ModelError::CanonicalViolation(format!(
                "central weight length {}",
                self.lambda.len()
            )));
        }
        for w in self.lambda.windows(2) {
            if w[1] > w[0] {
                return Err(ModelError::CanonicalViolation(
                    "central weight not non-increasing".into(),
                ));
            }
        }
        if self.lambda.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
            return Err(ModelError::CanonicalViolation(
                "central weight has non-positive entries".into(),
            ));
        }
        Ok(())
    }
}

fn check_isometry(m: &DenseTensor, tol: f64) -> Result<(), String> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    for i in 0..cols {
        for j in i..cols {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += m.data()[r * cols + i] * m.data()[r * cols + j];
            }
            let want = if i == j { 1.0 } else { 0.0 };
            if (acc - want).abs() > tol {
                return Err(format!("gram[{i},{j}] = {acc}, expected {want}"));
            }
        }
    }
    Ok(())
}

pub(crate) fn transpose(m: &DenseTensor) -> DenseTensor {
    m.permute(&[1, 0])
}

/// Thin SVD that drops singular values below `SV_REL_EPS` of the largest.
/// Returns `(u, s, v)` with `u: rows x k`, `v: cols x k`. Small or thin
/// matrices take the Jacobi path; large square ones go through the full
/// bidiagonalization.
pub(crate) fn thin_svd_dropping_zeros(
    m: &DenseTensor,
) -> Result<(DenseTensor, Vec<f64>, DenseTensor), ModelError> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let jacobi = if rows >= cols && cols <= 32 {
        crate::tensor::jacobi_svd_thin(rows, cols, m.data())
    } else if cols > rows && rows <= 32 {
        let t = crate::model::transpose(m);
        crate::tensor::jacobi_svd_thin(cols, rows, t.data())
            .map(|(u, s, v)| (v, s, u))
    } else {
        None
    };
    if let Some((u, s, v)) = jacobi {
        let size = s.len();
        let cutoff = s.first().copied().unwrap_or(0.0) * SV_REL_EPS;
        let mut k = s.iter().take_while(|&&x| x > cutoff).count();
        if k == 0 && size > 0 && s[0] > 0.0 {
            k = 1;
        }
        if k == 0 {
            return Err(ModelError::DegenerateModel);
        }
        let shrink = |m: &[f64], nrows: usize| -> Vec<f64> {
            let mut out = vec![0.0; nrows * k];
            for r in 0..nrows {
                out[r * k..(r + 1) * k].copy_from_slice(&m[r * size..r * size + k]);
            }
            out
        };
        let mut ut = DenseTensor::new(vec![rows, k], shrink(&u, rows)).expect("u shape");
        let mut vt = DenseTensor::new(vec![cols, k], shrink(&v, cols)).expect("v shape");
        crate::tensor::fix_svd_signs(&mut ut, &mut vt);
        return Ok((ut, s[..k].to_vec(), vt));
    }
    let (u_full, s_full, v_full) = svd_raw(rows, cols, m.data()).map_err(ModelError::Tensor)?;
    let size = s_full.len();
    let cutoff = s_full.first().copied().unwrap_or(0.0) * SV_REL_EPS;
    let mut k = s_full.iter().take_while(|&&s| s > cutoff).count();
    if k == 0 && size > 0 && s_full[0] > 0.0 {
        k = 1;
    }
    if k == 0 {
        return Err(ModelError::DegenerateModel);
    }
    let mut u = vec![0.0; rows * k];
    for i in 0..rows {
        u[i * k..(i + 1) * k].copy_from_slice(&u_full[i * size..i * size + k]);
    }
    let mut v = vec![0.0; cols * k];
    for i in 0..cols {
        v[i * k..(i + 1) * k].copy_from_slice(&v_full[i * size..i * size + k]);
    }
    let mut ut = DenseTensor::new(vec![rows, k], u).expect("u shape");
    let mut vt = DenseTensor::new(vec![cols, k], v).expect("v shape");
    crate::tensor::fix_svd_signs(&mut ut, &mut vt);
    Ok((ut, s_full[..k].to_vec(), vt))
}
