use conscope_core::conscore::{compute_con_score, cosine_alignment, ConScoreOptions};
use conscope_core::dataio::{CovariateColumn, CovariateDescriptor};
use conscope_core::probes::{
    fit_logistic_probe, fit_ols_probe, mz_pseudo_r2, predict_linear, r_squared,
};
use conscope_core::reduce::{pca_fit, project_points};
use conscope_oracles::FixtureRng;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix(rng: &mut FixtureRng, n: usize, d: usize) -> DMatrix<f64> {
    let rows = rng.matrix(n, d);
    DMatrix::from_fn(n, d, |i, j| rows[i][j])
}

fn orthogonal(rng: &mut FixtureRng, d: usize) -> DMatrix<f64> {
    let q = rng.orthogonal(d);
    DMatrix::from_fn(d, d, |i, j| q[i][j])
}

fn linear_target(rng: &mut FixtureRng, h: &DMatrix<f64>, noise: f64) -> Vec<f64> {
    let beta: Vec<f64> = (0..h.ncols()).map(|_| rng.normal()).collect();
    (0..h.nrows())
        .map(|i| (0..h.ncols()).map(|j| h[(i, j)] * beta[j]).sum::<f64>() + noise * rng.normal())
        .collect()
}

fn binary_target(rng: &mut FixtureRng, h: &DMatrix<f64>) -> Vec<f64> {
    let eta = linear_target(rng, h, 1.0);
    let mut t: Vec<f64> = eta
        .iter()
        .map(|&e| if e > 0.0 { 1.0 } else { 0.0 })
        .collect();
    t[0] = 0.0;
    t[1] = 1.0;
    t
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ols_residuals_are_orthogonal(seed in any::<u64>(), n in 8usize..40, d in 1usize..5) {
        let mut rng = FixtureRng::new(seed);
        let h = matrix(&mut rng, n, d);
        let t = linear_target(&mut rng, &h, 0.7);
        let fit = fit_ols_probe(&h, &t, 0.0).unwrap();
        let pred = predict_linear(&fit, &h).unwrap();
        let resid: Vec<f64> = t.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let scale = t.iter().map(|v| v.abs()).fold(1.0, f64::max) * n as f64;
        prop_assert!(resid.iter().sum::<f64>().abs() < 1e-9 * scale);
        for j in 0..d {
            let dot: f64 = (0..n).map(|i| h[(i, j)] * resid[i]).sum();
            prop_assert!(dot.abs() < 1e-9 * scale, "column {j}: {dot}");
        }
        prop_assert!((0.0..=1.0).contains(&fit.fit_score));
    }

    #[test]
    fn probes_are_rotation_equivariant(seed in any::<u64>(), d in 2usize..5) {
        let mut rng = FixtureRng::new(seed);
        let h = matrix(&mut rng, 60, d);
        let q = orthogonal(&mut rng, d);
        let hq = &h * &q;
        let t = linear_target(&mut rng, &h, 0.5);
        let a = fit_ols_probe(&h, &t, 1e-3).unwrap();
        let b = fit_ols_probe(&hq, &t, 1e-3).unwrap();
        let expected = q.transpose() * nalgebra::DVector::from_column_slice(&a.weights);
        for j in 0..d {
            prop_assert!((expected[j] - b.weights[j]).abs() < 1e-8 * (1.0 + expected[j].abs()));
        }
        prop_assert!(rel(a.fit_score, b.fit_score) < 1e-9);

        let y = binary_target(&mut rng, &h);
        let a = fit_logistic_probe(&h, &y, 1e-2).unwrap();
        let b = fit_logistic_probe(&hq, &y, 1e-2).unwrap();
        let expected = q.transpose() * nalgebra::DVector::from_column_slice(&a.weights);
        for j in 0..d {
            prop_assert!((expected[j] - b.weights[j]).abs() < 1e-6 * (1.0 + expected[j].abs()));
        }
    }

    #[test]
    fn con_score_is_rotation_invariant(seed in any::<u64>(), d in 2usize..5) {
        let mut rng = FixtureRng::new(seed);
        let h = matrix(&mut rng, 50, d);
        let q = orthogonal(&mut rng, d);
        let w: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let wq: Vec<f64> = (q.transpose() * nalgebra::DVector::from_column_slice(&w)).iter().copied().collect();
        let t = linear_target(&mut rng, &h, 0.5);
        let desc = CovariateDescriptor::continuous("x");
        let col = CovariateColumn::Continuous(t.into_iter().map(Some).collect());
        let opts = ConScoreOptions { ridge_ols: Some(1e-3), ..Default::default() };
        let a = compute_con_score(&h, &desc, &col, &w, &opts).unwrap();
        let b = compute_con_score(&(&h * &q), &desc, &col, &wq, &opts).unwrap();
        prop_assert!((a.score - b.score).abs() < 1e-6);
        prop_assert_eq!(a.score, a.r2 * a.cos_abs);
    }

    #[test]
    fn r_squared_ignores_affine_target_changes(
        seed in any::<u64>(),
        scale in prop_oneof![-50.0..-0.01f64, 0.01..50.0f64],
        shift in -100.0..100.0f64,
    ) {
        let mut rng = FixtureRng::new(seed);
        let h = matrix(&mut rng, 30, 3);
        let t = linear_target(&mut rng, &h, 1.0);
        let t2: Vec<f64> = t.iter().map(|v| scale * v + shift).collect();
        let a = fit_ols_probe(&h, &t, 0.0).unwrap();
        let b = fit_ols_probe(&h, &t2, 0.0).unwrap();
        prop_assert!((a.fit_score - b.fit_score).abs() < 1e-9);
        prop_assert!(cosine_alignment(&a.weights, &b.weights).unwrap() > 1.0 - 1e-9);
    }

    #[test]
    fn r_squared_bounds(seed in any::<u64>()) {
        let mut rng = FixtureRng::new(seed);
        let t: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let t_hat: Vec<f64> = (0..20).map(|_| 3.0 * rng.normal()).collect();
        let r = r_squared(&t, &t_hat).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn mz_is_shift_invariant_and_bounded(seed in any::<u64>(), shift in -20.0..20.0f64) {
        let mut rng = FixtureRng::new(seed);
        let eta: Vec<f64> = (0..40).map(|_| 2.0 * rng.normal()).collect();
        let shifted: Vec<f64> = eta.iter().map(|v| v + shift).collect();
        let a = mz_pseudo_r2(&eta);
        prop_assert!((0.0..1.0).contains(&a));
        prop_assert!((a - mz_pseudo_r2(&shifted)).abs() < 1e-12);
    }

    #[test]
    fn cosine_ignores_scale(
        seed in any::<u64>(),
        alpha in prop_oneof![-1e6..-1e-6f64, 1e-6..1e6f64],
        beta in prop_oneof![-1e6..-1e-6f64, 1e-6..1e6f64],
    ) {
        let mut rng = FixtureRng::new(seed);
        let a: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let c0 = cosine_alignment(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| alpha * v).collect();
        let sb: Vec<f64> = b.iter().map(|v| beta * v).collect();
        prop_assert!((0.0..=1.0).contains(&c0));
        prop_assert!((c0 - cosine_alignment(&sa, &sb).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pca_axes_are_orthonormal(seed in any::<u64>(), d in 2usize..6) {
        let mut rng = FixtureRng::new(seed);
        let h = matrix(&mut rng, 25, d);
        let k = d.min(3);
        let p = pca_fit(&h, k).unwrap();
        let gram = &p.components * p.components.transpose();
        prop_assert!((gram - DMatrix::<f64>::identity(k, k)).amax() < 1e-10);
        let total: f64 = p.explained_ratio.iter().sum();
        prop_assert!(total <= 1.0 + 1e-12);
        prop_assert!(p.explained_ratio.windows(2).all(|w| w[0] >= w[1]));
        let coords = project_points(&p, &h).unwrap();
        prop_assert!(coords.row_mean().amax() < 1e-10);
    }
}
