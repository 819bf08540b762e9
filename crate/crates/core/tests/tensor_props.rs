//! Property tests for the tensor substrate.

use att_core::{contract, svd_truncate, DenseTensor};
use proptest::prelude::*;

fn tensor3(extent: usize) -> impl Strategy<Value = DenseTensor> {
    proptest::collection::vec(-10.0f64..10.0, extent * extent * extent).prop_map(move |data| {
        DenseTensor::new(vec![extent, extent, extent], data).unwrap()
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseTensor> {
    proptest::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |data| DenseTensor::new(vec![rows, cols], data).unwrap())
}

fn frobenius_sq_diff(a: &DenseTensor, b: &[f64]) -> f64 {
    a.data()
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contraction_is_bilinear(a in tensor3(3), b in tensor3(3), alpha in -5.0f64..5.0) {
        let mut scaled = a.clone();
        scaled.scale(alpha);
        let lhs = contract(&scaled, &b, &[(2, 0)]).unwrap();
        let mut rhs = contract(&a, &b, &[(2, 0)]).unwrap();
        rhs.scale(alpha);
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            let tol = 1e-12 * y.abs().max(1.0);
            prop_assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn discarded_weight_equals_residual_norm(m in matrix(7, 5), rank in 1usize..5) {
        let r = svd_truncate(&m, rank).unwrap();
        // reconstruct u diag(s) v^T
        let k = r.s.len();
        let mut recon = vec![0.0f64; 7 * 5];
        for i in 0..7 {
            for j in 0..5 {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += r.u.data()[i * k + l] * r.s[l] * r.v.data()[j * k + l];
                }
                recon[i * 5 + j] = acc;
            }
        }
        let resid = frobenius_sq_diff(&m, &recon);
        let scale = m.data().iter().map(|v| v * v).sum::<f64>().max(1e-12);
        prop_assert!(
            (resid - r.discarded_weight).abs() <= 1e-10 * scale,
            "residual {resid} vs discarded {}",
            r.discarded_weight
        );
    }

    #[test]
    fn full_rank_truncation_reconstructs(m in matrix(6, 6)) {
        let r = svd_truncate(&m, 6).unwrap();
        let k = r.s.len();
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += r.u.data()[i * k + l] * r.s[l] * r.v.data()[j * k + l];
                }
                let want = m.data()[i * 6 + j];
                let tol = 1e-10 * m.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
                prop_assert!((acc - want).abs() <= tol, "({i},{j}): {acc} vs {want}");
            }
        }
    }

    #[test]
    fn singular_vectors_are_isometric(m in matrix(8, 4), rank in 1usize..4) {
        let r = svd_truncate(&m, rank).unwrap();
        let k = r.s.len();
        for (mat, rows) in [(&r.u, 8usize), (&r.v, 4usize)] {
            for i in 0..k {
                for j in 0..k {
                    let mut acc = 0.0;
                    for row in 0..rows {
                        acc += mat.data()[row * k + i] * mat.data()[row * k + j];
                    }
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((acc - want).abs() <= 1e-10, "gram ({i},{j}) = {acc}");
                }
            }
        }
        // singular values sorted non-increasing, non-negative
        for w in r.s.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        if let Some(last) = r.s.last() {
            prop_assert!(*last >= 0.0);
        }
    }
}
