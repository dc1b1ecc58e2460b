use fusion_core::datagen::LqToy;
use fusion_core::discrepancy::mmd_joint;
use fusion_core::estimators::lq_alpha_sweep;
use fusion_core::metrics::{aggregate, mape, mse_tau, qini, MetricRow};
use fusion_core::moments::psi;
use nalgebra::DVector;
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn probs(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, k).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    })
}

/// Uplift test sample with both arms present.
fn uplift_sample() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, Vec<f64>)> {
    (4usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(0usize..2, n - 2).prop_map(|mut t| {
                t.extend([0, 1]);
                t
            }),
            prop::collection::vec(-10.0f64..10.0, n),
        )
    })
}

proptest! {
    #[test]
    fn psi_is_linear_in_the_residual(
        y in -10.0f64..10.0, m in -10.0f64..10.0, lam in -5.0f64..5.0,
        p in probs(3), t in 0usize..3,
    ) {
        let base = psi(y - m, t, 0.0, &p).unwrap();
        let scaled = psi(lam * (y - m), t, 0.0, &p).unwrap();
        let direct = psi(y, t, m, &p).unwrap();
        for k in 0..base.len() {
            prop_assert!((scaled[k] - lam * base[k]).abs() <= 1e-12 * (1.0 + scaled[k].abs()));
            prop_assert!((direct[k] - base[k]).abs() <= 1e-12 * (1.0 + base[k].abs()));
        }
    }

    #[test]
    fn mmd_self_zero_and_symmetric(a in matrix(7, 3), b in matrix(5, 3)) {
        prop_assert_eq!(mmd_joint(a.view(), a.view(), Some(1.3)).unwrap().value, 0.0);
        let ab = mmd_joint(a.view(), b.view(), None).unwrap();
        let ba = mmd_joint(b.view(), a.view(), None).unwrap();
        prop_assert!((ab.value - ba.value).abs() < 1e-12);
        prop_assert!(ab.value >= 0.0);
    }

    #[test]
    fn mmd_ignores_row_order(a in matrix(6, 2), b in matrix(8, 2), rot in 0usize..6) {
        let perm: Vec<usize> = (0..6).map(|i| (i + rot) % 6).collect();
        let rev: Vec<usize> = (0..8).rev().collect();
        let pa = a.select(ndarray::Axis(0), &perm);
        let pb = b.select(ndarray::Axis(0), &rev);
        let x = mmd_joint(a.view(), b.view(), None).unwrap();
        let y = mmd_joint(pa.view(), pb.view(), None).unwrap();
        prop_assert!((x.raw - y.raw).abs() < 1e-12);
    }

    #[test]
    fn qini_depends_only_on_ranking((tau, t, y) in uplift_sample()) {
        let q = qini(&tau, &t, &y).unwrap();
        let expd: Vec<f64> = tau.iter().map(|v| v.exp()).collect();
        prop_assert!((q - qini(&expd, &t, &y).unwrap()).abs() <= 1e-12);
        let affine: Vec<f64> = tau.iter().map(|v| 3.0 * v - 1.0).collect();
        prop_assert!((q - qini(&affine, &t, &y).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn mse_is_a_symmetric_distance(a in prop::collection::vec(-5.0f64..5.0, 1..40), shift in -2.0f64..2.0) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + shift * (i % 3) as f64).collect();
        prop_assert_eq!(mse_tau(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(mse_tau(&a, &b).unwrap(), mse_tau(&b, &a).unwrap());
    }

    #[test]
    fn mape_ignores_joint_row_order(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 10..80),
        rot in 0usize..80,
    ) {
        let (hat, truth): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let n = hat.len();
        let idx: Vec<usize> = (0..n).map(|i| (i * 7 + rot) % n).collect();
        // 7 is coprime with n unless n is a multiple of 7
        prop_assume!(n % 7 != 0);
        let ph: Vec<f64> = idx.iter().map(|&i| hat[i]).collect();
        let pt: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
        prop_assert_eq!(mape(&hat, &truth, 0.05).unwrap(), mape(&ph, &pt, 0.05).unwrap());
    }

    #[test]
    fn aggregates_recompute_from_rows(values in prop::collection::vec(-3.0f64..3.0, 2..12)) {
        let rows: Vec<MetricRow> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| MetricRow {
                method: "pd".into(),
                overlap_dial: 0.5,
                seed: i as u64,
                qini: v,
                mse_tau: v * v,
                mape: v.abs(),
                g_norm: 1.0 + v,
                ipm: 0.0,
                marginal_tv: 0.1,
            })
            .collect();
        let report = aggregate(&rows);
        prop_assert_eq!(report.aggregates.len(), 1);
        let agg = &report.aggregates[0];
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!((agg.qini.mean - mean).abs() <= 1e-12);
        prop_assert!((agg.qini.std.unwrap() - var.sqrt()).abs() <= 1e-12);
        prop_assert_eq!(agg.n_seeds, values.len());
    }

    #[test]
    fn excess_risk_bounds_moment_violation(seed in 0u64..1000, dim in 3usize..8, k in 1usize..3) {
        prop_assume!(k < dim);
        let toy = LqToy::benign(dim, k, seed).unwrap();
        let (consts, rows) = lq_alpha_sweep(&toy, &[0.0, 0.1, 0.5, 1.0, 4.0, 16.0]).unwrap();
        // quadratic growth modulus mu/2 and upper Lipschitz constant |A|_op
        let link = 0.5 * consts.mu / (consts.l_g * consts.l_g);
        let r_star = toy.risk_star();
        for r in &rows {
            prop_assert!(r.r_o - r_star >= link * r.g_norm * r.g_norm - 1e-10);
        }
        let theta = DVector::from_fn(dim, |i, _| ((seed + i as u64) % 5) as f64 - 2.0);
        let g = toy.residual(&theta).norm();
        prop_assert!(toy.risk(&theta) - r_star >= link * g * g - 1e-10);
    }
}
