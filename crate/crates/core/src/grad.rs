//! Batched evaluation environments and the NLL gradient at the root.
//!
//! For a batch of samples, the contraction of each subtree with its leaves
//! clamped is a per-sample boundary vector on the subtree's outgoing edge.
//! Those vectors are cached per tail node and reused across gradient steps:
//! during updates at one bond only the two root tensors change, so the
//! boundary vectors of the four hanging subtrees stay valid. Rows are kept
//! unit-norm with separate log scales; the scales cancel in the gradient and
//! in the mutual-information estimator, so nothing underflows even for a
//! thousand variables.

use std::collections::BTreeMap;

use crate::batch::DataBatch;
use crate::error::ModelError;
use crate::model::TensorTreeModel;
use crate::tensor::{matmul, DenseTensor};
use crate::topology::{Edge, NodeId};

/// Per-sample boundary vectors for the subtree behind `tail`, contracted
/// toward `head`. `data` is rows-by-dim with unit-norm rows; `log_scale[s]`
/// restores the true magnitude (`-inf` marks an exactly zero subtree).
#[derive(Debug, Clone)]
pub(crate) struct EnvBlock {
    pub head: NodeId,
    pub dim: usize,
    pub data: Vec<f64>,
    pub log_scale: Vec<f64>,
}

#[derive(Debug)]
pub(crate) struct EnvCache {
    rows: usize,
    blocks: BTreeMap<NodeId, EnvBlock>,
}

impl EnvCache {
    pub fn new(rows: usize) -> Self {
        Self {
            rows,
            blocks: BTreeMap::new(),
        }
    }

    pub fn invalidate(&mut self, node: NodeId) {
        self.blocks.remove(&node);
    }

    /// Relabels the direction of a still-valid block after a rewire moved
    /// the subtree to a new parent.
    pub fn rename_head(&mut self, tail: NodeId, new_head: NodeId) {
        if let Some(b) = self.blocks.get_mut(&tail) {
            b.head = new_head;
        }
    }

    /// Boundary vectors for `tail` toward `head`, computing and caching
    /// anything missing below.
    pub fn block(
        &mut self,
        model: &TensorTreeModel,
        batch: &DataBatch,
        tail: NodeId,
        head: NodeId,
    ) -> &EnvBlock {
        self.ensure(model, batch, tail, head);
        &self.blocks[&tail]
    }

    /// Read-only access to an already-ensured block.
    pub fn get(&self, tail: NodeId) -> &EnvBlock {
        &self.blocks[&tail]
    }

    pub(crate) fn ensure(
        &mut self,
        model: &TensorTreeModel,
        batch: &DataBatch,
        tail: NodeId,
        head: NodeId,
    ) {
        if let Some(b) = self.blocks.get(&tail) {
            if b.head == head {
                return;
            }
        }
        let block = if model.topology().is_leaf(tail) {
            leaf_block(batch, tail, head)
        } else {
            let nt = &model.tensors[&tail];
            let parent = Edge::new(tail, head);
            let (m, others) = nt.unfold_toward(parent);
            let mut children = [0 as NodeId; 2];
            for (i, leg) in others.iter().enumerate() {
                children[i] = leg.other(tail);
                self.ensure(model, batch, children[i], tail);
            }
            let c1 = &self.blocks[&children[0]];
            let c2 = &self.blocks[&children[1]];
            contract_block(&m, c1, c2, head, self.rows)
        };
        self.blocks.insert(tail, block);
    }
}

fn leaf_block(batch: &DataBatch, leaf: NodeId, head: NodeId) -> EnvBlock {
    let rows = batch.len();
    let mut data = vec![0.0f64; rows * 2];
    for s in 0..rows {
        data[s * 2 + batch.row(s)[leaf as usize] as usize] = 1.0;
    }
    EnvBlock {
        head,
        dim: 2,
        data,
        log_scale: vec![0.0; rows],
    }
}

/// `m` is the node tensor unfolded as (d1*d2) x dp with the child axes in
/// block order; contracts both child blocks through it, row by row.
fn contract_block(
    m: &DenseTensor,
    c1: &EnvBlock,
    c2: &EnvBlock,
    head: NodeId,
    rows: usize,
) -> EnvBlock {
    let d1 = c1.dim;
    let d2 = c2.dim;
    let dp = m.shape()[1];
    debug_assert_eq!(m.shape()[0], d1 * d2);
    // w[s, (b, p)] = sum_a c1[s, a] * m[(a, b), p]
    let w = matmul(rows, d1, d2 * dp, &c1.data, m.data());
    let mut data = vec![0.0f64; rows * dp];
    let mut log_scale = vec![0.0f64; rows];
    for s in 0..rows {
        let out = &mut data[s * dp..(s + 1) * dp];
        let wrow = &w[s * d2 * dp..(s + 1) * d2 * dp];
        let crow = &c2.data[s * d2..(s + 1) * d2];
        for (b, &cb) in crow.iter().enumerate() {
            if cb == 0.0 {
                continue;
            }
            let chunk = &wrow[b * dp..(b + 1) * dp];
            for (o, &wv) in out.iter_mut().zip(chunk) {
                *o += cb * wv;
            }
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ls = c1.log_scale[s] + c2.log_scale[s];
        if norm == 0.0 || !norm.is_finite() {
            log_scale[s] = f64::NEG_INFINITY;
            out.fill(0.0);
        } else {
            for o in out.iter_mut() {
                *o /= norm;
            }
            log_scale[s] = ls + norm.ln();
        }
    }
    EnvBlock {
        head,
        dim: dp,
        data,
        log_scale,
    }
}

/// Per-sample environment of one side of the working tensor: the row-wise
/// outer product of that side's boundary vectors.
#[derive(Debug, Clone)]
pub(crate) struct SideEnv {
    pub dim: usize,
    pub data: Vec<f64>,
    pub log_scale: Vec<f64>,
}

pub(crate) fn side_env(blocks: &[&EnvBlock], rows: usize) -> SideEnv {
    match blocks {
        [one] => SideEnv {
            dim: one.dim,
            data: one.data.clone(),
            log_scale: one.log_scale.clone(),
        },
        [first, second] => {
            let (d1, d2) = (first.dim, second.dim);
            let dim = d1 * d2;
            let mut data = vec![0.0f64; rows * dim];
            let mut log_scale = vec![0.0f64; rows];
            for s in 0..rows {
                let out = &mut data[s * dim..(s + 1) * dim];
                let a = &first.data[s * d1..(s + 1) * d1];
                let b = &second.data[s * d2..(s + 1) * d2];
                for (i, &av) in a.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    for (j, &bv) in b.iter().enumerate() {
                        out[i * d2 + j] = av * bv;
                    }
                }
                log_scale[s] = first.log_scale[s] + second.log_scale[s];
            }
            SideEnv {
                dim,
                data,
                log_scale,
            }
        }
        _ => unreachable!("side environments have one or two legs"),
    }
}

/// How zero-amplitude samples are treated during gradient work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ZeroPolicy {
    /// Fail with the offending sample index.
    Strict,
    /// Clamp squared amplitudes at 1e-300 so early training survives.
    Clamp,
}

const CLAMP_PSI: f64 = 1e-150;

/// Normalized per-sample amplitudes `psi_hat[s] = <M[s] (x) N[s], T>`.
pub(crate) fn psi_hat(t: &DenseTensor, ma: &SideEnv, nb: &SideEnv, rows: usize) -> Vec<f64> {
    let p = matmul(rows, ma.dim, nb.dim, &ma.data, t.data());
    let mut out = vec![0.0f64; rows];
    for s in 0..rows {
        let mut acc = 0.0;
        let pr = &p[s * nb.dim..(s + 1) * nb.dim];
        let nr = &nb.data[s * nb.dim..(s + 1) * nb.dim];
        for (x, y) in pr.iter().zip(nr) {
            acc += x * y;
        }
        out[s] = acc;
    }
    out
}

/// NLL gradient with respect to the working tensor `t` (axes: side A then
/// side B):  `2 t / |t|^2  -  (2/B) sum_s E_s / psi_s`.
pub(crate) fn nll_gradient(
    t: &DenseTensor,
    ma: &SideEnv,
    nb: &SideEnv,
    rows: usize,
    policy: ZeroPolicy,
) -> Result<(DenseTensor, Vec<f64>), ModelError> {
    let psi = psi_hat(t, ma, nb, rows);
    let mut weights = vec![0.0f64; rows];
    for (s, &v) in psi.iter().enumerate() {
        let v = if v == 0.0 || ma.log_scale[s] == f64::NEG_INFINITY {
            match policy {
                ZeroPolicy::Strict => return Err(ModelError::ZeroAmplitude { sample: s }),
                ZeroPolicy::Clamp => CLAMP_PSI,
            }
        } else if v.abs() < CLAMP_PSI {
            CLAMP_PSI * v.signum()
        } else {
            v
        };
        weights[s] = 1.0 / v;
    }
    // G[i, j] = sum_s w_s M[s, i] N[s, j]
    let mut scaled = ma.data.clone();
    for s in 0..rows {
        let w = weights[s];
        for v in &mut scaled[s * ma.dim..(s + 1) * ma.dim] {
            *v *= w;
        }
    }
    let g = matmul_tn(ma.dim, rows, nb.dim, &scaled, &nb.data);
    let norm2: f64 = t.data().iter().map(|v| v * v).sum();
    let scale_t = 2.0 / norm2;
    let scale_g = 2.0 / rows as f64;
    let data: Vec<f64> = t
        .data()
        .iter()
        .zip(&g)
        .map(|(&tv, &gv)| scale_t * tv - scale_g * gv)
        .collect();
    let grad = DenseTensor::new(t.shape().to_vec(), data).expect("gradient shape");
    Ok((grad, psi))
}

/// `C = A^T B` where `a` is stored row-major as `k x m` and `b` as `k x n`.
fn matmul_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f64; m * n];
    if m == 0 || k == 0 || n == 0 {
        return c;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// The merged tensor at the root edge: both root tensors and the central
/// weight contracted into one working tensor. For a root on a virtual bond
/// the result has four legs (the two outward legs of the smaller endpoint,
/// then the larger's); for a root on a leaf edge it has three (the leaf's
/// physical index first).
#[derive(Debug, Clone)]
pub(crate) struct Working {
    pub a_legs: Vec<Edge>,
    pub b_legs: Vec<Edge>,
    /// Subtree tails matching `a_legs ++ b_legs`.
    pub tails: Vec<NodeId>,
    pub t: DenseTensor,
}

impl Working {
    pub fn dims(&self) -> &[usize] {
        self.t.shape()
    }
}

pub(crate) fn merge_working(model: &TensorTreeModel) -> Result<Working, ModelError> {
    let topo = model.topology();
    let root = topo.root_edge();
    let (rx, ry) = root.endpoints();
    let lambda = &model.lambda;
    let r = lambda.len();
    if topo.is_leaf(rx) {
        let p = model
            .root_leaf_isometry
            .as_ref()
            .expect("leaf root edge requires leaf isometry");
        let mut a = p.clone();
        for row in 0..2 {
            for k in 0..r {
                a.data_mut()[row * r + k] *= lambda[k];
            }
        }
        let nt = &model.tensors[&ry];
        let others: Vec<Edge> = nt.legs.iter().copied().filter(|&e| e != root).collect();
        let perm_legs: Vec<Edge> = std::iter::once(root).chain(others.iter().copied()).collect();
        let perm: Vec<usize> = perm_legs.iter().map(|&e| nt.axis_of(e)).collect();
        let tb = nt.tensor.permute(&perm);
        let (d1, d2) = (tb.shape()[1], tb.shape()[2]);
        let data = matmul(2, r, d1 * d2, a.data(), tb.data());
        let t = DenseTensor::new(vec![2, d1, d2], data).expect("merge shape");
        let tails = vec![rx, others[0].other(ry), others[1].other(ry)];
        Ok(Working {
            a_legs: vec![root],
            b_legs: others,
            tails,
            t,
        })
    } else {
        let outer = topo.root_outer_legs()?;
        let ntx = &model.tensors[&rx];
        let nty = &model.tensors[&ry];
        let perm_x: Vec<usize> = [outer[0], outer[1], root]
            .iter()
            .map(|&e| ntx.axis_of(e))
            .collect();
        let perm_y: Vec<usize> = [root, outer[2], outer[3]]
            .iter()
            .map(|&e| nty.axis_of(e))
            .collect();
        let tx = ntx.tensor.permute(&perm_x);
        let ty = nty.tensor.permute(&perm_y);
        let (da0, da1) = (tx.shape()[0], tx.shape()[1]);
        let (db0, db1) = (ty.shape()[1], ty.shape()[2]);
        let mut ax = tx.into_data();
        for row in 0..da0 * da1 {
            for k in 0..r {
                ax[row * r + k] *= lambda[k];
            }
        }
        let data = matmul(da0 * da1, r, db0 * db1, &ax, ty.data());
        let t = DenseTensor::new(vec![da0, da1, db0, db1], data).expect("merge shape");
        let tails = vec![
            outer[0].other(rx),
            outer[1].other(rx),
            outer[2].other(ry),
            outer[3].other(ry),
        ];
        Ok(Working {
            a_legs: vec![outer[0], outer[1]],
            b_legs: vec![outer[2], outer[3]],
            tails,
            t,
        })
    }
}

/// Gradient of the batch NLL with respect to the merged working tensor at
/// the current root edge. The returned tensor has the working tensor's
/// shape and axis order.
pub fn grad_root_tensor(
    model: &TensorTreeModel,
    batch: &DataBatch,
) -> Result<DenseTensor, ModelError> {
    if batch.n() != model.n() {
        return Err(ModelError::WrongLength {
            expected: model.n(),
            got: batch.n(),
        });
    }
    let working = merge_working(model)?;
    let rows = batch.len();
    let mut cache = EnvCache::new(rows);
    let (ma, nb) = working_envs(model, batch, &working, &mut cache);
    let (grad, _) = nll_gradient(&working.t, &ma, &nb, rows, ZeroPolicy::Strict)?;
    Ok(grad)
}

pub(crate) fn working_envs(
    model: &TensorTreeModel,
    batch: &DataBatch,
    working: &Working,
    cache: &mut EnvCache,
) -> (SideEnv, SideEnv) {
    let rows = batch.len();
    let heads: Vec<NodeId> = {
        let root = model.topology().root_edge();
        let (rx, ry) = root.endpoints();
        let na = working.a_legs.len();
        working
            .tails
            .iter()
            .enumerate()
            .map(|(i, _)| if i < na { rx } else { ry })
            .collect()
    };
    for (i, &tail) in working.tails.iter().enumerate() {
        cache.ensure(model, batch, tail, heads[i]);
    }
    let na = working.a_legs.len();
    let a_blocks: Vec<&EnvBlock> = working.tails[..na]
        .iter()
        .map(|t| &cache.blocks[t])
        .collect();
    let ma = side_env(&a_blocks, rows);
    let b_blocks: Vec<&EnvBlock> = working.tails[na..]
        .iter()
        .map(|t| &cache.blocks[t])
        .collect();
    let nb = side_env(&b_blocks, rows);
    (ma, nb)
}

/// Per-sample boundary vectors of both root-edge sides, each row already
/// contracted through its side's isometries. Rows are unit-normalized with
/// the log scale returned alongside.
pub(crate) fn root_side_vectors(
    model: &TensorTreeModel,
    batch: &DataBatch,
    cache: &mut EnvCache,
) -> ((Vec<f64>, Vec<f64>), (Vec<f64>, Vec<f64>)) {
    let rows = batch.len();
    let root = model.topology().root_edge();
    let (rx, ry) = root.endpoints();
    let r = model.lambda.len();
    let mut side = |node: NodeId, other: NodeId| -> (Vec<f64>, Vec<f64>) {
        if model.topology().is_leaf(node) {
            let p = model
                .root_leaf_isometry
                .as_ref()
                .expect("leaf root edge requires leaf isometry");
            let mut data = vec![0.0f64; rows * r];
            for s in 0..rows {
                let bit = batch.row(s)[node as usize] as usize;
                data[s * r..(s + 1) * r].copy_from_slice(&p.data()[bit * r..(bit + 1) * r]);
            }
            (data, vec![0.0; rows])
        } else {
            let b = cache.block(model, batch, node, other);
            (b.data.clone(), b.log_scale.clone())
        }
    };
    (side(rx, ry), side(ry, rx))
}

/// Log-probabilities of every row in the batch, `-inf` for zero amplitude.
pub(crate) fn batch_log_probs_cached(
    model: &TensorTreeModel,
    batch: &DataBatch,
    cache: &mut EnvCache,
) -> Result<Vec<f64>, ModelError> {
    if batch.n() != model.n() {
        return Err(ModelError::WrongLength {
            expected: model.n(),
            got: batch.n(),
        });
    }
    let rows = batch.len();
    let lambda = &model.lambda;
    let r = lambda.len();
    let ((a, lsa), (b, lsb)) = root_side_vectors(model, batch, cache);
    let ln_z = model.z().ln();
    let mut out = vec![0.0f64; rows];
    for s in 0..rows {
        let mut acc = 0.0;
        for k in 0..r {
            acc += a[s * r + k] * lambda[k] * b[s * r + k];
        }
        out[s] = if acc == 0.0
            || lsa[s] == f64::NEG_INFINITY
            || lsb[s] == f64::NEG_INFINITY
        {
            f64::NEG_INFINITY
        } else {
            2.0 * (acc.abs().ln() + lsa[s] + lsb[s]) - ln_z
        };
    }
    Ok(out)
}

pub(crate) fn batch_log_probs(
    model: &TensorTreeModel,
    batch: &DataBatch,
) -> Result<Vec<f64>, ModelError> {
    let mut cache = EnvCache::new(batch.len());
    batch_log_probs_cached(model, batch, &mut cache)
}
