//! Bond mutual information: the mutual information between the two
//! variable groups created by cutting an edge.
//!
//! `bmi_exact` enumerates the joint distribution and is guarded to small n.
//! `bmi_empirical` is the sample-average estimator over a data batch; it is
//! only valid at the canonical center, where both marginals follow from the
//! central weight and the side contractions alone.

use crate::batch::DataBatch;
use crate::error::ModelError;
use crate::grad::{root_side_vectors, EnvCache};
use crate::model::TensorTreeModel;
use crate::topology::Edge;

/// Largest variable count accepted by `bmi_exact`.
pub const BMI_EXACT_MAX_N: usize = 16;

/// Exact mutual information (in nats) across the bipartition at `edge`,
/// by full enumeration of the model distribution.
pub fn bmi_exact(model: &TensorTreeModel, edge: Edge) -> Result<f64, ModelError> {
    let n = model.n();
    if n > BMI_EXACT_MAX_N {
        return Err(ModelError::EnumerationGuard {
            n,
            max: BMI_EXACT_MAX_N,
        });
    }
    let (side_a, side_b) = model.topology().bipartition(edge)?;
    let probs = model.enumerate_probabilities(BMI_EXACT_MAX_N)?;
    let vars_a: Vec<usize> = side_a.iter().map(|&v| v as usize).collect();
    let vars_b: Vec<usize> = side_b.iter().map(|&v| v as usize).collect();
    let mut pa = vec![0.0f64; 1 << vars_a.len()];
    let mut pb = vec![0.0f64; 1 << vars_b.len()];
    let pack = |k: usize, vars: &[usize]| -> usize {
        vars.iter()
            .fold(0usize, |acc, &v| (acc << 1) | ((k >> (n - 1 - v)) & 1))
    };
    for (k, &p) in probs.iter().enumerate() {
        pa[pack(k, &vars_a)] += p;
        pb[pack(k, &vars_b)] += p;
    }
    let mut mi = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            mi += p * (p / (pa[pack(k, &vars_a)] * pb[pack(k, &vars_b)])).ln();
        }
    }
    Ok(mi.max(0.0))
}

/// Sample-average estimator of the mutual information across the root
/// edge: the mean over the batch of `ln[p(a,b) / (p(a) p(b))]`, with the
/// absolute value taken when the raw average comes out negative.
pub fn bmi_empirical(
    model: &TensorTreeModel,
    edge: Edge,
    batch: &DataBatch,
) -> Result<f64, ModelError> {
    let root = model.root_edge();
    if edge != root {
        return Err(ModelError::NotRootEdge { got: edge, root });
    }
    if batch.n() != model.n() {
        return Err(ModelError::WrongLength {
            expected: model.n(),
            got: batch.n(),
        });
    }
    let rows = batch.len();
    let mut cache = EnvCache::new(rows);
    let ((a, lsa), (b, lsb)) = root_side_vectors(model, batch, &mut cache);
    let lambda = model.lambda();
    let r = lambda.len();
    let ln_z = model.z().ln();
    let mut acc = 0.0;
    for s in 0..rows {
        let ar = &a[s * r..(s + 1) * r];
        let br = &b[s * r..(s + 1) * r];
        let mut psi = 0.0;
        let mut pa = 0.0;
        let mut pb = 0.0;
        for k in 0..r {
            let l = lambda[k];
            psi += ar[k] * l * br[k];
            pa += l * l * ar[k] * ar[k];
            pb += l * l * br[k] * br[k];
        }
        if psi == 0.0
            || pa <= 0.0
            || pb <= 0.0
            || lsa[s] == f64::NEG_INFINITY
            || lsb[s] == f64::NEG_INFINITY
        {
            return Err(ModelError::ZeroProbability { sample: s });
        }
        acc += 2.0 * psi.abs().ln() - pa.ln() - pb.ln() + ln_z;
    }
    let mean = acc / rows as f64;
    Ok(mean.abs())
}
