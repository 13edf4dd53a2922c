use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use smallball::gaussian::{
    beta_solve, conditional_variance, design, estimate_tail_constants, gaussian_correlation_check,
    grid_event_probability, matrix_norm_11, noise_covariance, summarize_model, CovarianceModel, GridScheme, Slab,
    TailSettings,
};

proptest! {
    #[test]
    fn induced_norm_bound(entries in prop::collection::vec(-5.0f64..5.0, 9), x in prop::collection::vec(-3.0f64..3.0, 3)) {
        let a = DMatrix::from_vec(3, 3, entries);
        let x = DVector::from_vec(x);
        let lhs = (&a * &x).lp_norm(1);
        prop_assert!(lhs <= matrix_norm_11(&a).unwrap() * x.lp_norm(1) + 1e-12);
    }
}

#[test]
fn designed_models_meet_the_structural_bounds() {
    let eps = [0.1, 0.2, 0.3];
    let d = design(&eps, 0.5, 0.5, 1.0, 1.0, 1.0).unwrap();
    let c8 = d.constants.c8;
    assert!(d.constants.c11 > 0.0);
    for (model, s) in d.models.iter().zip(&d.summaries) {
        assert!(model.s.clone().cholesky().is_some(), "S not positive definite at eps {}", s.eps);
        assert!(s.beta_l1_max <= 0.5, "beta {} at eps {}", s.beta_l1_max, s.eps);
        assert!(s.variance_ratio_min >= c8 * (1.0 - 1e-9));
        assert!(s.variance_ratio_max <= d.constants.c9 * (1.0 + 1e-9));
        assert!(s.s_inv_norm11 <= 2.0 / (c8 * s.eps * s.eps), "eps {}", s.eps);
        assert!(s.eta < 1.0);
    }
}

#[test]
fn beta_norm_falls_as_spacing_grows() {
    let mut last = f64::INFINITY;
    for theta in [2.0, 4.0, 8.0, 16.0] {
        let scheme = GridScheme::new(0.2, 0.5, theta, 1.0).unwrap();
        let model = CovarianceModel::build(scheme, 1.0).unwrap();
        let b = summarize_model(&model).unwrap().beta_l1_max;
        assert!(b < last, "theta {}: {b} !< {last}", scheme.theta);
        last = b;
    }
}

#[test]
fn conditional_variance_is_the_schur_complement() {
    let scheme = GridScheme::new(0.3, 0.5, 3.0, 1.0).unwrap();
    let model = CovarianceModel::build(scheme, 1.0).unwrap();
    let s = &model.s;
    for j in [1, 3, model.size() - 1] {
        let a = s.view((0, 0), (j, j)).into_owned();
        let y = s.view((0, j), (j, 1)).into_owned();
        let direct = s[(j, j)] - (y.transpose() * a.clone().cholesky().unwrap().solve(&y))[(0, 0)];
        let got = conditional_variance(&model, j).unwrap();
        assert!((got - direct).abs() < 1e-10 * s[(j, j)], "j={j}: {got} vs {direct}");
        let beta = beta_solve(&model, j).unwrap();
        let resid = (&a * &beta - y.column(0)).norm() / y.norm();
        assert!(resid < 1e-10);
        // Minkowski bound on the predictor's spread.
        let sd_x = (beta.transpose() * &a * &beta)[(0, 0)].sqrt();
        let sd_max = (0..j).map(|k| s[(k, k)].sqrt()).fold(0.0, f64::max);
        assert!(sd_x <= beta.lp_norm(1) * sd_max + 1e-14);
    }
}

#[test]
fn covariance_is_symmetric_and_near_closed_form() {
    let scheme = GridScheme::new(0.2, 0.5, 4.0, 1.0).unwrap();
    let t1 = scheme.t1();
    let v = noise_covariance(2, 2, &scheme, 1.0).unwrap();
    assert!((v / (t1 / std::f64::consts::PI).sqrt() - 1.0).abs() < 0.02);
    let (a, b) = (noise_covariance(1, 4, &scheme, 1.0).unwrap(), noise_covariance(4, 1, &scheme, 1.0).unwrap());
    assert_eq!(a, b);
}

#[test]
fn grid_event_below_product_bound() {
    let scheme = GridScheme::new(0.3, 0.5, 3.0, 1.0).unwrap();
    let model = CovarianceModel::build(scheme, 1.0).unwrap();
    let s = summarize_model(&model).unwrap();
    let (p, se) = grid_event_probability(&model, 20_000, 5).unwrap();
    let cap = s.eta.powi(model.size() as i32);
    assert!(p - 3.0 * se <= cap, "p {p} ± {se}, cap {cap}");
}

#[test]
fn correlation_inequality_cases() {
    let id = DMatrix::<f64>::identity(2, 2);
    let k = vec![Slab { a: vec![1.0, 0.0], b: 1.0 }];
    let l = vec![Slab { a: vec![1.0, 1.0], b: 1.0 }];
    let r = gaussian_correlation_check(&k, &l, &id, 40_000, 1).unwrap();
    assert!(!r.violated && r.gap > 0.0, "{r:?}");
    let same = gaussian_correlation_check(&k, &k, &id, 20_000, 2).unwrap();
    assert_eq!(same.mu_kl, same.mu_k);
    assert!(same.mu_k >= same.mu_k * same.mu_k);
    let flat = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    assert!(gaussian_correlation_check(&k, &l, &flat, 10, 1).is_err());
}

#[test]
fn tail_decay_scales_with_noise_strength() {
    let base = TailSettings::default();
    let loud = TailSettings { sigma_scale: 2.0, ..base };
    let a = estimate_tail_constants(1.0, &[0.2], 4000, 7, &base).unwrap();
    let b = estimate_tail_constants(1.0, &[0.2], 4000, 7, &loud).unwrap();
    assert!(a.r_squared >= 0.98 && b.r_squared >= 0.98);
    // Doubling σ divides the λ² rate by four, so K₂ is unchanged.
    let ratio = a.slope / (4.0 * b.slope);
    assert!((ratio - 1.0).abs() < 0.2, "slope ratio {ratio}");
    assert!((a.k2 / b.k2 - 1.0).abs() < 0.2);
}
