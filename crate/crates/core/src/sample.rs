//! Perfect sampling from the Born distribution.
//!
//! Variables are drawn one at a time in depth-first order from the root
//! edge outward. Entering a subtree carries a conditional density matrix on
//! its bond; summing out an untouched sibling subtree is free because its
//! isometries contract to the identity. Each draw is therefore exact and a
//! full sample costs one pass over the tree.

use rand::Rng;

use crate::model::TensorTreeModel;
use crate::tensor::{matmul, matmul_nt};
use crate::topology::{Edge, NodeId};

/// One exact draw from the model distribution.
pub fn sample<R: Rng>(model: &TensorTreeModel, rng: &mut R) -> Vec<u8> {
    let topo = model.topology();
    let root = topo.root_edge();
    let (rx, ry) = root.endpoints();
    let lambda = model.lambda();
    let r = lambda.len();
    let mut out = vec![0u8; model.n()];

    let va = if topo.is_leaf(rx) {
        // the A side is a single physical index behind the leaf isometry
        let p = model
            .root_leaf_isometry()
            .expect("leaf root edge requires leaf isometry");
        let weight = |bit: usize| -> f64 {
            (0..r)
                .map(|k| {
                    let v = p.data()[bit * r + k] * lambda[k];
                    v * v
                })
                .sum()
        };
        let bit = draw_bit(weight(0), weight(1), rng);
        out[rx as usize] = bit as u8;
        (0..r).map(|k| p.data()[bit * r + k]).collect::<Vec<f64>>()
    } else {
        let mut rho = vec![0.0f64; r * r];
        let z: f64 = lambda.iter().map(|l| l * l).sum();
        for k in 0..r {
            rho[k * r + k] = lambda[k] * lambda[k] / z;
        }
        sample_subtree(model, rx, root, &rho, rng, &mut out)
    };

    // condition the B side on the fixed A side
    let mut w: Vec<f64> = (0..r).map(|k| lambda[k] * va[k]).collect();
    let norm2: f64 = w.iter().map(|v| v * v).sum();
    if norm2 > 0.0 {
        let inv = 1.0 / norm2;
        for v in &mut w {
            *v *= inv.sqrt();
        }
    }
    let mut rho_b = vec![0.0f64; r * r];
    for i in 0..r {
        for j in 0..r {
            rho_b[i * r + j] = w[i] * w[j];
        }
    }
    sample_subtree(model, ry, root, &rho_b, rng, &mut out);
    out
}

/// Draws every variable below `node` (looking away from `parent_edge`),
/// given the conditional density matrix on that edge. Returns the fixed
/// subtree's boundary vector, unit-normalized.
fn sample_subtree<R: Rng>(
    model: &TensorTreeModel,
    node: NodeId,
    parent_edge: Edge,
    rho: &[f64],
    rng: &mut R,
    out: &mut [u8],
) -> Vec<f64> {
    let nt = &model.tensors[&node];
    let (m, others) = nt.unfold_toward(parent_edge);
    let d1 = nt.dim_of(others[0]);
    let d2 = nt.dim_of(others[1]);
    let dp = m.shape()[1];

    // marginal density on the first child bond; the untouched second
    // subtree contracts to the identity over its bond
    // w[(a,b), p'] = sum_p T[(a,b), p] rho[p, p']
    let w = matmul(d1 * d2, dp, dp, m.data(), rho);
    // rho1[a, a'] = sum_{b, p'} w[(a,b), p'] T[(a',b), p']
    let rho1 = matmul_nt(d1, d2 * dp, d1, &w, m.data());
    let v1 = descend(model, node, others[0], &rho1, rng, out);

    // condition on the fixed first subtree
    // t1[b, p] = sum_a v1[a] T[(a,b), p]
    let t1 = matmul(1, d1, d2 * dp, &v1, m.data());
    // y[b, p'] = sum_p t1[b, p] rho[p, p']
    let y = matmul(d2, dp, dp, &t1, rho);
    let rho2 = matmul_nt(d2, dp, d2, &y, &t1);
    let v2 = descend(model, node, others[1], &rho2, rng, out);

    // boundary vector of the now fully fixed subtree
    let mut vp = vec![0.0f64; dp];
    for b in 0..d2 {
        let vb = v2[b];
        if vb == 0.0 {
            continue;
        }
        for p in 0..dp {
            vp[p] += vb * t1[b * dp + p];
        }
    }
    normalize(&mut vp);
    vp
}

fn descend<R: Rng>(
    model: &TensorTreeModel,
    node: NodeId,
    leg: Edge,
    rho: &[f64],
    rng: &mut R,
    out: &mut [u8],
) -> Vec<f64> {
    let child = leg.other(node);
    if model.topology().is_leaf(child) {
        let p0 = rho[0].max(0.0);
        let p1 = rho[3].max(0.0);
        let bit = draw_bit(p0, p1, rng);
        out[child as usize] = bit as u8;
        let mut v = vec![0.0, 0.0];
        v[bit] = 1.0;
        v
    } else {
        let mut r = rho.to_vec();
        normalize_trace(&mut r);
        sample_subtree(model, child, leg, &r, rng, out)
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

fn normalize_trace(rho: &mut [f64]) {
    let d = (rho.len() as f64).sqrt() as usize;
    let tr: f64 = (0..d).map(|i| rho[i * d + i]).sum();
    if tr > 0.0 {
        for x in rho.iter_mut() {
            *x /= tr;
        }
    }
}

fn draw_bit<R: Rng>(p0: f64, p1: f64, rng: &mut R) -> usize {
    let total = p0 + p1;
    if total <= 0.0 || !total.is_finite() {
        return usize::from(rng.gen::<f64>() < 0.5);
    }
    usize::from(rng.gen::<f64>() * total >= p0)
}
