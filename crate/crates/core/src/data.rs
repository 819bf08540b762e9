//! Data generators and loaders: random bit patterns, Bayesian polytrees,
//! IDX image files, stock-return binarization, and batching utilities.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};

use crate::batch::DataBatch;
use crate::error::DataError;

/// Layout of the random-pattern task: fixed-width rows whose left and right
/// margins are random bits while everything in between stays zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternSpec {
    pub total_bits: usize,
    pub left_random: usize,
    pub right_random: usize,
    pub num_patterns: usize,
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self {
            total_bits: 128,
            left_random: 32,
            right_random: 32,
            num_patterns: 10,
        }
    }
}

impl PatternSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.total_bits == 0 || self.num_patterns == 0 {
            return Err(DataError::InfeasibleSpec(
                "total bits and pattern count must be positive".into(),
            ));
        }
        let random = self.left_random + self.right_random;
        if random > self.total_bits {
            return Err(DataError::InfeasibleSpec(format!(
                "left {} + right {} exceed total width {}",
                self.left_random, self.right_random, self.total_bits
            )));
        }
        if random < 64 && self.num_patterns > (1usize << random) {
            return Err(DataError::InfeasibleSpec(format!(
                "{} distinct patterns cannot fit in {} random bits",
                self.num_patterns, random
            )));
        }
        Ok(())
    }
}

/// Draws `num_patterns` pairwise-distinct rows; the middle block is zero
/// and the margins are fair coin flips. Duplicates are redrawn.
pub fn gen_random_patterns(spec: &PatternSpec, seed: u64) -> Result<DataBatch, DataError> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<u8>> = HashSet::with_capacity(spec.num_patterns);
    let mut rows: Vec<Vec<u8>> = Vec::with_capacity(spec.num_patterns);
    while rows.len() < spec.num_patterns {
        let mut row = vec![0u8; spec.total_bits];
        for bit in row.iter_mut().take(spec.left_random) {
            *bit = rng.gen_range(0..2);
        }
        for bit in row.iter_mut().skip(spec.total_bits - spec.right_random) {
            *bit = rng.gen_range(0..2);
        }
        if seen.insert(row.clone()) {
            rows.push(row);
        }
    }
    DataBatch::from_rows(&rows)
}

/// Directed polytree over binary variables with a shared correlation rate.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesPolytree {
    pub n: usize,
    pub edges: Vec<(u32, u32)>,
    pub r: f64,
}

impl BayesPolytree {
    pub fn new(n: usize, edges: Vec<(u32, u32)>, r: f64) -> Result<Self, DataError> {
        if n == 0 {
            return Err(DataError::InfeasibleSpec("polytree needs n >= 1".into()));
        }
        if !(r > 0.5 && r <= 1.0) {
            return Err(DataError::InfeasibleSpec(format!(
                "correlation rate must lie in (0.5, 1], got {r}"
            )));
        }
        // undirected acyclicity via union-find
        let mut parent: Vec<u32> = (0..n as u32).collect();
        fn find(parent: &mut [u32], x: u32) -> u32 {
            let mut x = x;
            while parent[x as usize] != x {
                parent[x as usize] = parent[parent[x as usize] as usize];
                x = parent[x as usize];
            }
            x
        }
        for &(a, b) in &edges {
            if a as usize >= n || b as usize >= n || a == b {
                return Err(DataError::InfeasibleSpec(format!(
                    "edge ({a},{b}) out of range for n = {n}"
                )));
            }
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                return Err(DataError::InfeasibleSpec(format!(
                    "edge ({a},{b}) closes a cycle"
                )));
            }
            parent[ra as usize] = rb;
        }
        Ok(Self { n, edges, r })
    }

    /// Variables in topological order (parents before children).
    fn topo_order(&self) -> Vec<u32> {
        let mut indeg = vec![0usize; self.n];
        let mut children: Vec<Vec<u32>> = vec![Vec::new(); self.n];
        for &(p, c) in &self.edges {
            indeg[c as usize] += 1;
            children[p as usize].push(c);
        }
        let mut order: Vec<u32> = (0..self.n as u32)
            .filter(|&v| indeg[v as usize] == 0)
            .collect();
        let mut head = 0;
        while head < order.len() {
            let v = order[head];
            head += 1;
            for &c in &children[v as usize] {
                indeg[c as usize] -= 1;
                if indeg[c as usize] == 0 {
                    order.push(c);
                }
            }
        }
        order
    }

    pub fn parents_of(&self, v: u32) -> Vec<u32> {
        self.edges
            .iter()
            .filter(|&&(_, c)| c == v)
            .map(|&(p, _)| p)
            .collect()
    }
}

/// Ancestral sampling: parentless variables are fair coins; every other
/// variable copies the XOR of its parents with probability `r` and flips
/// it otherwise.
pub fn sample_polytree(
    bn: &BayesPolytree,
    count: usize,
    seed: u64,
) -> Result<DataBatch, DataError> {
    if count == 0 {
        return Err(DataError::TooFewRows { need: 1, got: 0 });
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let order = bn.topo_order();
    let parents: Vec<Vec<u32>> = (0..bn.n as u32).map(|v| bn.parents_of(v)).collect();
    let mut data = vec![0u8; count * bn.n];
    for s in 0..count {
        let row = &mut data[s * bn.n..(s + 1) * bn.n];
        for &v in &order {
            let ps = &parents[v as usize];
            let bit = if ps.is_empty() {
                rng.gen_range(0..2u8)
            } else {
                let x = ps.iter().fold(0u8, |acc, &p| acc ^ row[p as usize]);
                if rng.gen::<f64>() < bn.r {
                    x
                } else {
                    1 - x
                }
            };
            row[v as usize] = bit;
        }
    }
    DataBatch::new(bn.n, data)
}

fn read_u32_be<R: Read>(r: &mut R, what: &str) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| DataError::Format(format!("truncated IDX file while reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image file plus its label file, binarizes at `threshold`
/// (strictly greater means 1) and centers each image in a `pad_to x pad_to`
/// zero frame. Rows are flattened row-major.
pub fn load_idx_binarized(
    images_path: &Path,
    labels_path: &Path,
    threshold: u8,
    pad_to: usize,
) -> Result<DataBatch, DataError> {
    let mut imgf = std::io::BufReader::new(std::fs::File::open(images_path)?);
    let magic = read_u32_be(&mut imgf, "image magic")?;
    if magic != 2051 {
        return Err(DataError::Format(format!(
            "bad image magic {magic:#010x}, expected 0x00000803"
        )));
    }
    let count = read_u32_be(&mut imgf, "image count")? as usize;
    let rows = read_u32_be(&mut imgf, "image rows")? as usize;
    let cols = read_u32_be(&mut imgf, "image cols")? as usize;
    if rows == 0 || cols == 0 || count == 0 {
        return Err(DataError::Format("empty IDX image file".into()));
    }
    if rows > pad_to || cols > pad_to {
        return Err(DataError::Format(format!(
            "image {rows}x{cols} does not fit in {pad_to}x{pad_to}"
        )));
    }
    let mut pixels = vec![0u8; count * rows * cols];
    imgf.read_exact(&mut pixels)
        .map_err(|_| DataError::Format("truncated IDX image data".into()))?;
    let mut trailing = [0u8; 1];
    if imgf.read(&mut trailing)? != 0 {
        return Err(DataError::Format(
            "trailing bytes after IDX image data".into(),
        ));
    }

    let mut lblf = std::io::BufReader::new(std::fs::File::open(labels_path)?);
    let magic = read_u32_be(&mut lblf, "label magic")?;
    if magic != 2049 {
        return Err(DataError::Format(format!(
            "bad label magic {magic:#010x}, expected 0x00000801"
        )));
    }
    let label_count = read_u32_be(&mut lblf, "label count")? as usize;
    if label_count != count {
        return Err(DataError::Format(format!(
            "label count {label_count} does not match image count {count}"
        )));
    }
    let mut labels = vec![0u8; label_count];
    lblf.read_exact(&mut labels)
        .map_err(|_| DataError::Format("truncated IDX label data".into()))?;

    let off_r = (pad_to - rows) / 2;
    let off_c = (pad_to - cols) / 2;
    let n = pad_to * pad_to;
    let mut data = vec![0u8; count * n];
    for img in 0..count {
        let src = &pixels[img * rows * cols..(img + 1) * rows * cols];
        let dst = &mut data[img * n..(img + 1) * n];
        for r in 0..rows {
            for c in 0..cols {
                if src[r * cols + c] > threshold {
                    dst[(r + off_r) * pad_to + (c + off_c)] = 1;
                }
            }
        }
    }
    DataBatch::new(n, data)
}

/// One bit per entry: 1 where the day's change rate strictly exceeds that
/// day's cross-sectional mean.
pub fn binarize_returns(rows: &[Vec<f64>]) -> Result<DataBatch, DataError> {
    if rows.is_empty() {
        return Err(DataError::TooFewRows { need: 1, got: 0 });
    }
    let n = rows[0].len();
    if n == 0 {
        return Err(DataError::Format("empty return rows".into()));
    }
    let mut out = Vec::with_capacity(rows.len() * n);
    for (day, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(DataError::Format(format!(
                "day {day} has {} entries, expected {n}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Format(format!(
                "non-finite change rate on day {day}"
            )));
        }
        let mean = row.iter().sum::<f64>() / n as f64;
        out.extend(row.iter().map(|&v| u8::from(v > mean)));
    }
    DataBatch::new(n, out)
}

/// Disjoint, exhaustive, seeded split: the first part receives
/// `ceil(fraction * rows)` shuffled rows.
pub fn split_train_test(
    batch: &DataBatch,
    fraction: f64,
    seed: u64,
) -> Result<(DataBatch, DataBatch), DataError> {
    let m = batch.len();
    if m < 2 {
        return Err(DataError::TooFewRows { need: 2, got: m });
    }
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(DataError::InfeasibleSpec(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let take = (fraction * m as f64).ceil() as usize;
    if take == 0 || take >= m {
        return Err(DataError::InfeasibleSpec(format!(
            "split of {m} rows at {fraction} leaves an empty side"
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    Ok((batch.select(&idx[..take]), batch.select(&idx[take..])))
}

/// Repeatable stream of mini-batches: every refresh draws `size` rows
/// uniformly without replacement.
#[derive(Debug)]
pub struct MinibatchStream<'a> {
    source: &'a DataBatch,
    size: usize,
    rng: StdRng,
}

impl<'a> MinibatchStream<'a> {
    pub fn new(source: &'a DataBatch, size: usize, seed: u64) -> Result<Self, DataError> {
        if size == 0 || size > source.len() {
            return Err(DataError::BatchTooLarge {
                size,
                rows: source.len(),
            });
        }
        Ok(Self {
            source,
            size,
            rng: StdRng::seed_from_u64(seed),
        })
    }

    /// Draws the next mini-batch. A size equal to the source returns the
    /// full batch unchanged.
    pub fn next_batch(&mut self) -> DataBatch {
        if self.size == self.source.len() {
            return self.source.clone();
        }
        let picks = index_sample(&mut self.rng, self.source.len(), self.size);
        let idx: Vec<usize> = picks.into_iter().collect();
        self.source.select(&idx)
    }
}
