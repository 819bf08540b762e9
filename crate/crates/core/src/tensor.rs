//! Dense real tensors with row-major storage, pairwise contraction, and
//! rank-truncated SVD.
//!
//! Contraction is realized as permute/reshape/GEMM so its cost is a single
//! matrix product over the paired indices. The SVD carries a deterministic
//! sign convention (the largest-magnitude entry of each left singular vector
//! is positive) so decompositions are reproducible across runs.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::svd::{svd_scratch, ComputeSvdVectors, SvdParams};
use faer::{Par, Spec};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::TensorError;

/// Multi-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    /// Tensor filled with i.i.d. standard Gaussian entries.
    pub fn random_gaussian<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.data {
            *v *= a;
        }
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Returns a copy with axes reordered so that output axis `i` is input
    /// axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        debug_assert_eq!(perm.len(), self.shape.len());
        let rank = perm.len();
        if rank <= 1 || perm.iter().enumerate().all(|(i, &p)| i == p) {
            return self.clone();
        }
        let in_strides = row_major_strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        // stride in the input for stepping output axis i
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = vec![0.0; self.data.len()];
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for slot in out.iter_mut() {
            *slot = self.data[src];
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
                src -= strides[ax] * out_shape[ax];
            }
        }
        Self {
            shape: out_shape,
            data: out,
        }
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Row-major matrix product `C = A * B` with `A: m x k`, `B: k x n`.
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
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
            k as isize,
            1,
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

/// Row-major product `C = A * B^T` with `A: m x k`, `B: n x k`.
pub(crate) fn matmul_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
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
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Contracts `a` and `b` over the given `(axis of a, axis of b)` pairs.
///
/// The result carries the unpaired axes of `a` followed by the unpaired axes
/// of `b`, each in their original order.
pub fn contract(
    a: &DenseTensor,
    b: &DenseTensor,
    pairs: &[(usize, usize)],
) -> Result<DenseTensor, TensorError> {
    let ra = a.rank();
    let rb = b.rank();
    let mut used_a = vec![false; ra];
    let mut used_b = vec![false; rb];
    for &(pa, pb) in pairs {
        if pa >= ra {
            return Err(TensorError::AxisOutOfRange { axis: pa, rank: ra });
        }
        if pb >= rb {
            return Err(TensorError::AxisOutOfRange { axis: pb, rank: rb });
        }
        if used_a[pa] {
            return Err(TensorError::DuplicateAxis { axis: pa });
        }
        if used_b[pb] {
            return Err(TensorError::DuplicateAxis { axis: pb });
        }
        if a.shape[pa] != b.shape[pb] {
            return Err(TensorError::ContractionMismatch {
                axis_a: pa,
                extent_a: a.shape[pa],
                axis_b: pb,
                extent_b: b.shape[pb],
            });
        }
        used_a[pa] = true;
        used_b[pb] = true;
    }

    let free_a: Vec<usize> = (0..ra).filter(|&i| !used_a[i]).collect();
    let free_b: Vec<usize> = (0..rb).filter(|&i| !used_b[i]).collect();

    // a: free axes first, paired axes last (in pair order)
    let mut perm_a: Vec<usize> = free_a.clone();
    perm_a.extend(pairs.iter().map(|&(pa, _)| pa));
    // b: paired axes first (same order), free axes last
    let mut perm_b: Vec<usize> = pairs.iter().map(|&(_, pb)| pb).collect();
    perm_b.extend(free_b.iter().copied());

    let m: usize = free_a.iter().map(|&i| a.shape[i]).product();
    let k: usize = pairs.iter().map(|&(pa, _)| a.shape[pa]).product();
    let n: usize = free_b.iter().map(|&i| b.shape[i]).product();

    let pa = a.permute(&perm_a);
    let pb = b.permute(&perm_b);
    let out = matmul(m, k, n, &pa.data, &pb.data);

    let mut shape: Vec<usize> = free_a.iter().map(|&i| a.shape[i]).collect();
    shape.extend(free_b.iter().map(|&i| b.shape[i]));
    DenseTensor::new(shape, out)
}

/// Truncated singular value decomposition of a matrix.
///
/// `u` and `v` hold isometric columns, `s` the kept singular values in
/// non-increasing order, so the original matrix approximates
/// `u * diag(s) * v^T`. `discarded_weight` is the summed square of the
/// dropped singular values.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseTensor,
    pub s: Vec<f64>,
    pub v: DenseTensor,
    pub discarded_weight: f64,
}

/// Thin SVD of a row-major `rows x cols` slice with the first `keep_cols`
/// singular vectors flattened back to row-major; all singular values are
/// returned in non-increasing order. Runs sequentially for reproducibility.
pub(crate) fn svd_raw_keep(
    rows: usize,
    cols: usize,
    data: &[f64],
    keep_cols: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), TensorError> {
    let size = rows.min(cols);
    let keep = keep_cols.min(size);
    let a = faer::MatRef::from_row_major_slice(data, rows, cols);
    let mut u = faer::Mat::<f64>::zeros(rows, size);
    let mut v = faer::Mat::<f64>::zeros(cols, size);
    let mut s = faer::diag::Diag::<f64>::zeros(size);
    let par = Par::Seq;
    let params: Spec<SvdParams, f64> = Default::default();
    let mut mem = MemBuffer::new(svd_scratch::<f64>(
        rows,
        cols,
        ComputeSvdVectors::Thin,
        ComputeSvdVectors::Thin,
        par,
        params,
    ));
    faer::linalg::svd::svd(
        a,
        s.as_mut(),
        Some(u.as_mut()),
        Some(v.as_mut()),
        par,
        MemStack::new(&mut mem),
        params,
    )
    .map_err(|_| TensorError::SvdFailed)?;

    let flatten = |m: &faer::Mat<f64>, nrows: usize| -> Vec<f64> {
        let mut out = vec![0.0; nrows * keep];
        for j in 0..keep {
            let col = m
                .as_ref()
                .col(j)
                .try_as_col_major()
                .expect("faer Mat columns are contiguous")
                .as_slice();
            for i in 0..nrows {
                out[i * keep + j] = col[i];
            }
        }
        out
    };
    let uo = flatten(&u, rows);
    let vo = flatten(&v, cols);
    let so: Vec<f64> = (0..size).map(|i| s[i]).collect();
    Ok((uo, so, vo))
}

/// Thin SVD keeping every singular vector.
pub(crate) fn svd_raw(
    rows: usize,
    cols: usize,
    data: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), TensorError> {
    svd_raw_keep(rows, cols, data, rows.min(cols))
}

/// One-sided Jacobi SVD for thin matrices (`rows >= cols`, `cols` small).
/// Returns `(u: rows x cols, s desc, v: cols x cols)` row-major, or `None`
/// if rotations fail to converge. The column-rotation form is cheap for
/// the small cores and thin unfoldings the canonical form produces, and
/// avoids per-call scratch setup entirely.
pub(crate) fn jacobi_svd_thin(
    rows: usize,
    cols: usize,
    data: &[f64],
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    debug_assert!(rows >= cols);
    // column-major working copy
    let mut a = vec![0.0f64; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            a[c * rows + r] = data[r * cols + c];
        }
    }
    let mut v = vec![0.0f64; cols * cols];
    for i in 0..cols {
        v[i * cols + i] = 1.0;
    }
    let mut converged = false;
    for _sweep in 0..40 {
        let mut off = 0.0f64;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0f64, 0.0f64, 0.0f64);
                {
                    let (head, tail) = a.split_at(q * rows);
                    let cp = &head[p * rows..p * rows + rows];
                    let cq = &tail[..rows];
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                }
                let denom = (alpha * beta).sqrt();
                if denom == 0.0 || gamma.abs() <= 1e-15 * denom {
                    continue;
                }
                off = off.max(gamma.abs() / denom);
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let rotate = |m: &mut [f64], len: usize, p: usize, q: usize| {
                    let (head, tail) = m.split_at_mut(q * len);
                    let cp = &mut head[p * len..p * len + len];
                    let cq = &mut tail[..len];
                    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                        let xp = c * *x - s * *y;
                        let yq = s * *x + c * *y;
                        *x = xp;
                        *y = yq;
                    }
                };
                rotate(&mut a, rows, p, q);
                rotate(&mut v, cols, p, q);
            }
        }
        if off < 1e-15 {
            converged = true;
            break;
        }
    }
    if !converged {
        return None;
    }
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols)
        .map(|j| {
            a[j * rows..(j + 1) * rows]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut u = vec![0.0f64; rows * cols];
    let mut s = vec![0.0f64; cols];
    let mut vt = vec![0.0f64; cols * cols];
    for (slot, &j) in order.iter().enumerate() {
        let norm = norms[j];
        s[slot] = norm;
        if norm > 0.0 {
            for r in 0..rows {
                u[r * cols + slot] = a[j * rows + r] / norm;
            }
        }
        for r in 0..cols {
            vt[r * cols + slot] = v[j * cols + r];
        }
    }
    Some((u, s, vt))
}

/// Rank-truncated SVD of a rank-2 tensor, keeping at most `max_rank`
/// singular triples and all of them when the matrix rank is smaller.
pub fn svd_truncate(m: &DenseTensor, max_rank: usize) -> Result<SvdResult, TensorError> {
    if m.rank() != 2 {
        return Err(TensorError::NotAMatrix { rank: m.rank() });
    }
    if max_rank == 0 {
        return Err(TensorError::ZeroRank);
    }
    let (rows, cols) = (m.shape[0], m.shape[1]);
    let keep = max_rank.min(rows.min(cols));
    let (u, s_full, v) = svd_raw_keep(rows, cols, &m.data, keep)?;
    if s_full.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "svd" });
    }
    let discarded_weight: f64 = s_full[keep..].iter().map(|&x| x * x).sum();
    let mut result = SvdResult {
        u: DenseTensor::new(vec![rows, keep], u)?,
        s: s_full[..keep].to_vec(),
        v: DenseTensor::new(vec![cols, keep], v)?,
        discarded_weight,
    };
    fix_svd_signs(&mut result.u, &mut result.v);
    Ok(result)
}

/// Sign convention: the largest-magnitude entry of each column of `u` is
/// positive; the matching column of `v` is flipped along with it.
pub(crate) fn fix_svd_signs(u: &mut DenseTensor, v: &mut DenseTensor) {
    let (rows, k) = (u.shape[0], u.shape[1]);
    let vrows = v.shape[0];
    debug_assert_eq!(v.shape[1], k);
    for col in 0..k {
        let mut best = 0.0f64;
        let mut sign = 1.0f64;
        for row in 0..rows {
            let val = u.data[row * k + col];
            if val.abs() > best {
                best = val.abs();
                sign = if val < 0.0 { -1.0 } else { 1.0 };
            }
        }
        if sign < 0.0 {
            for row in 0..rows {
                u.data[row * k + col] = -u.data[row * k + col];
            }
            for row in 0..vrows {
                v.data[row * k + col] = -v.data[row * k + col];
            }
        }
    }
}
