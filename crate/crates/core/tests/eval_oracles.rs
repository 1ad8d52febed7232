use depthrefine::eval::{d1_rate, epe, quadfit, refined_disparity, EvalMask};
use depthrefine::{CameraRig, ScalarField};
use proptest::prelude::*;

/// Least squares through Householder QR of the raw Vandermonde matrix,
/// sharing nothing with the normal-equation solver under test.
fn qr_quadfit(points: &[(f64, f64)]) -> [f64; 3] {
    let m = points.len();
    let mut a: Vec<[f64; 3]> = points.iter().map(|&(x, _)| [x * x, x, 1.0]).collect();
    let mut y: Vec<f64> = points.iter().map(|p| p.1).collect();
    for k in 0..3 {
        let norm = (k..m).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| a[i][k]).collect();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        for j in k..3 {
            let s: f64 = (k..m).map(|i| v[i - k] * a[i][j]).sum::<f64>() * 2.0 / vv;
            for i in k..m {
                a[i][j] -= s * v[i - k];
            }
        }
        let s: f64 = (k..m).map(|i| v[i - k] * y[i]).sum::<f64>() * 2.0 / vv;
        for i in k..m {
            y[i] -= s * v[i - k];
        }
    }
    let mut c = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|j| a[r][j] * c[j]).sum();
        c[r] = (y[r] - s) / a[r][r];
    }
    c
}

#[test]
fn quadfit_matches_qr_oracle_on_noisy_points() {
    let pts = [(0.5, 3.1), (1.5, 2.2), (2.5, 4.9), (3.5, 9.7), (4.5, 17.0)];
    let (a2, a1, a0) = quadfit(&pts).unwrap();
    let [o2, o1, o0] = qr_quadfit(&pts);
    assert!((a2 - o2).abs() < 1e-6 && (a1 - o1).abs() < 1e-6 && (a0 - o0).abs() < 1e-6);
    // residuals are orthogonal to every column at the optimum
    for col in 0..3 {
        let g: f64 = pts
            .iter()
            .map(|&(x, y)| {
                let r = y - (a2 * x * x + a1 * x + a0);
                r * [x * x, x, 1.0][col]
            })
            .sum();
        assert!(g.abs() < 1e-8, "column {col}: {g}");
    }
}

#[test]
fn quadfit_matches_oracle_on_binned_series_shape() {
    // 1 m bins up to 90 m with millimeter medians growing quadratically.
    let pts: Vec<(f64, f64)> = (0..90)
        .map(|k| {
            let x = k as f64 + 0.5;
            (x, 0.7 * x * x + 3.0 * x + 40.0 + 25.0 * ((k * 7919) % 13) as f64)
        })
        .collect();
    let (a2, a1, a0) = quadfit(&pts).unwrap();
    let [o2, o1, o0] = qr_quadfit(&pts);
    assert!((a2 - o2).abs() < 1e-6 * o2.abs().max(1.0));
    assert!((a1 - o1).abs() < 1e-6 * o1.abs().max(1.0));
    assert!((a0 - o0).abs() < 1e-6 * o0.abs().max(1.0));
}

fn grid(values: Vec<f64>) -> ScalarField {
    let n = values.len();
    ScalarField::from_values(n, 1, values).unwrap()
}

proptest! {
    #[test]
    fn quadfit_agrees_with_oracle(
        xs in prop::collection::btree_set(-500i32..500, 3..30),
        seed in any::<u64>(),
    ) {
        let pts: Vec<(f64, f64)> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let x = x as f64 / 10.0;
                let noise = ((seed.wrapping_mul(i as u64 + 1) >> 40) % 1000) as f64 / 100.0;
                (x, 0.3 * x * x - 2.0 * x + 1.0 + noise)
            })
            .collect();
        let (a2, a1, a0) = quadfit(&pts).unwrap();
        let [o2, o1, o0] = qr_quadfit(&pts);
        prop_assert!((a2 - o2).abs() < 1e-6 * o2.abs().max(1.0));
        prop_assert!((a1 - o1).abs() < 1e-6 * o1.abs().max(1.0));
        prop_assert!((a0 - o0).abs() < 1e-6 * o0.abs().max(1.0));
    }

    #[test]
    fn mask_shrinks_with_tighter_limits(
        z in prop::collection::vec(0.5f64..150.0, 1..64),
        d_max_a in 1.0f64..200.0,
        d_max_b in 1.0f64..200.0,
        cap_a in 1.0f64..120.0,
        cap_b in 1.0f64..120.0,
    ) {
        let rig = CameraRig::default();
        let z_gt = grid(z.clone());
        let d_gt = grid(z.iter().map(|&v| rig.bf() / v).collect());
        let ok = vec![true; z.len()];
        let (lo_d, hi_d) = (d_max_a.min(d_max_b), d_max_a.max(d_max_b));
        let (lo_c, hi_c) = (cap_a.min(cap_b), cap_a.max(cap_b));
        let big = EvalMask::with_depth_cap(&ok, &z_gt, &d_gt, &ok, hi_d, hi_c).unwrap();
        let small_d = EvalMask::with_depth_cap(&ok, &z_gt, &d_gt, &ok, lo_d, hi_c).unwrap();
        let small_c = EvalMask::with_depth_cap(&ok, &z_gt, &d_gt, &ok, hi_d, lo_c).unwrap();
        prop_assert!(small_d.count() <= big.count());
        prop_assert!(small_c.count() <= big.count());
    }

    #[test]
    fn d1_is_non_increasing_in_threshold(
        pairs in prop::collection::vec((1.0f64..100.0, -6.0f64..6.0), 1..64),
    ) {
        let d_gt = grid(pairs.iter().map(|p| p.0).collect());
        let d = grid(pairs.iter().map(|p| p.0 + p.1).collect());
        let mask = vec![true; pairs.len()];
        let r1 = d1_rate(&d, &d_gt, &mask, 1.0).unwrap();
        let r3 = d1_rate(&d, &d_gt, &mask, 3.0).unwrap();
        prop_assert!(r3 <= r1);
        prop_assert!((0.0..=1.0).contains(&r1));
    }

    #[test]
    fn exact_depth_gives_near_zero_epe(
        d in prop::collection::vec(1.0f64..200.0, 1..64),
    ) {
        let rig = CameraRig::default();
        let d_gt = grid(d.clone());
        let z = grid(d.iter().map(|&v| rig.bf() / v).collect());
        let back = refined_disparity(&z, &rig);
        let e = epe(&back, &d_gt, &vec![true; d.len()]).unwrap();
        prop_assert!(e < 1e-12, "{}", e);
    }
}
