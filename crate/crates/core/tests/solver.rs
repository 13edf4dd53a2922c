use std::f64::consts::PI;

use rayon::prelude::*;
use smallball::girsanov::lower_bound_drift;
use smallball::solver::{solve_frozen_comparison, Stepper};
use smallball::stats::{self, line_fit};
use smallball::white_noise::{path_seed, sample_noise, NoisePath};
use smallball::{DriftSpec, Field, Grid, Model, SigmaSpec, TiltSpec};

fn final_values(model: &Model, n: u64, seed: u64, tilt: Option<&TiltSpec>) -> Vec<Field> {
    (0..n)
        .into_par_iter()
        .map_init(
            || Stepper::new(model.grid),
            |st, i| {
                let noise = sample_noise(model.grid, model.dim(), seed, i).unwrap();
                model.run(st, &noise, tilt).unwrap().last().clone()
            },
        )
        .collect()
}

#[test]
fn additive_field_is_gaussian_and_stationary() {
    let grid = Grid::new(1.0, 0.02, 32, 40).unwrap();
    let model = Model::centred(grid, SigmaSpec::scalar(0.7, 1).unwrap()).unwrap();
    let ends = final_values(&model, 10_000, 21, None);
    let at = |m: usize| ends.iter().map(|f| f.get(m, 0)).collect::<Vec<_>>();
    let x0 = at(0);
    let s = stats::shape_moments(&x0).unwrap();
    assert!(s.skewness.abs() < 4.0 * s.skewness_se, "{s:?}");
    assert!(s.excess_kurtosis.abs() < 4.0 * s.kurtosis_se, "{s:?}");

    // Second moments at points across the circle agree.
    let sq = |v: &[f64]| v.iter().map(|a| a * a).collect::<Vec<_>>();
    let ref_sq = sq(&x0);
    for m in [8, 16, 23] {
        let other = sq(&at(m));
        let (a, b) = (stats::mean(&ref_sq), stats::mean(&other));
        let se = (stats::stderr(&ref_sq).powi(2) + stats::stderr(&other).powi(2)).sqrt();
        assert!((a - b).abs() < 4.0 * se, "x index {m}: {a} vs {b}");
    }
}

#[test]
fn refinement_changes_sup_statistics_little() {
    let fine = Grid::new(1.0, 0.05, 128, 128).unwrap();
    let coarse = Grid::new(1.0, 0.05, 64, 64).unwrap();
    let sigma = SigmaSpec::identity(1).unwrap();
    let mf = Model::centred(fine, sigma.clone()).unwrap();
    let mc = Model::centred(coarse, sigma).unwrap();
    let pairs: Vec<(f64, f64)> = (0..1000u64)
        .into_par_iter()
        .map_init(
            || (Stepper::new(fine), Stepper::new(coarse)),
            |(sf, sc), i| {
                let noise = sample_noise(fine, 1, 33, i).unwrap();
                let agg = noise.aggregate().unwrap();
                let a = mf.run(sf, &noise, None).unwrap().sup_norm;
                let b = mc.run(sc, &agg, None).unwrap().sup_norm;
                (a, b)
            },
        )
        .collect();
    let a = stats::mean(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let b = stats::mean(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    assert!((a / b - 1.0).abs() < 0.10, "fine {a} coarse {b}");
}

#[test]
fn zero_tilt_and_replay() {
    let grid = Grid::new(1.0, 0.01, 16, 10).unwrap();
    let u0 = Field::from_fn(grid.circle(), 2, |x, o| {
        o[0] = 0.1 * (2.0 * PI * x).sin();
        o[1] = -0.05;
    });
    let sigma = SigmaSpec::state_dependent(2, 0.5, 1.5, 0.8).unwrap();
    let model = Model::new(grid, u0, sigma, DriftSpec::constant(vec![0.3, -0.2])).unwrap();
    let noise = sample_noise(grid, 2, 6, 0).unwrap();
    let mut st = Stepper::new(grid);
    let plain = model.run(&mut st, &noise, None).unwrap();
    let zero = TiltSpec::Drift(DriftSpec::zero(2));
    let tilted = model.run(&mut st, &noise, Some(&zero)).unwrap();
    assert_eq!(plain.max_abs_diff(&tilted).unwrap(), 0.0);
    let again = model.run(&mut Stepper::new(grid), &noise, None).unwrap();
    assert_eq!(plain.snapshots, again.snapshots);
    assert_eq!(plain.sup_per_snapshot, again.sup_per_snapshot);
}

#[test]
fn steering_tilt_removes_the_mean() {
    let t1 = 0.02;
    let grid = Grid::new(1.0, t1, 16, 20).unwrap();
    let sigma = SigmaSpec::identity(1).unwrap();
    let u0 = Field::constant(grid.circle(), &[0.25]);
    let model = Model::new(grid, u0.clone(), sigma.clone(), DriftSpec::zero(1)).unwrap();
    let drift = lower_bound_drift(&u0, t1, &sigma, &grid).unwrap();
    let tilt = TiltSpec::Drift(drift);
    let ends = final_values(&model, 10_000, 44, Some(&tilt));
    let v: Vec<f64> = ends.iter().map(|f| f.get(5, 0)).collect();
    let m = stats::mean(&v);
    assert!(m.abs() < 3.0 * stats::stderr(&v), "mean {m}");
    // Without the tilt the mean stays at the start value.
    let plain = final_values(&model, 2000, 44, None);
    let p: Vec<f64> = plain.iter().map(|f| f.get(5, 0)).collect();
    assert!((stats::mean(&p) - 0.25).abs() < 4.0 * stats::stderr(&p));
}

#[test]
fn frozen_difference_scales_with_lipschitz_constant() {
    let eps = 0.3;
    let grid = Grid::new(1.0, 0.01, 32, 40).unwrap();
    let u0 = Field::zeros(grid.circle(), 1);
    let lips = [0.1, 0.3, 1.0];
    let mut sizes = Vec::new();
    for &d in &lips {
        let sigma = SigmaSpec::state_dependent(1, 0.5, 1.5, d).unwrap();
        let sups: Vec<f64> = (0..400u64)
            .into_par_iter()
            .map(|i| {
                let noise = NoisePath::sample(grid, 1, path_seed(91, i)).unwrap();
                let c = solve_frozen_comparison(&u0, &noise, &sigma, eps).unwrap();
                assert!(c.v.max_abs_diff(&c.v_g).is_ok());
                c.diff.sup_norm
            })
            .collect();
        sizes.push(stats::mean(&sups));
    }
    let x: Vec<f64> = lips.iter().map(|d: &f64| d.ln()).collect();
    let y: Vec<f64> = sizes.iter().map(|s| s.ln()).collect();
    let fit = line_fit(&x, &y).unwrap();
    assert!((fit.slope - 1.0).abs() <= 0.15, "slope {} from {sizes:?}", fit.slope);
}

#[test]
fn frozen_difference_vanishes_for_constant_coefficient() {
    let grid = Grid::new(1.0, 0.01, 16, 10).unwrap();
    let u0 = Field::from_fn(grid.circle(), 1, |x, o| o[0] = 0.1 * (2.0 * PI * x).cos());
    let noise = sample_noise(grid, 1, 2, 0).unwrap();
    let c = solve_frozen_comparison(&u0, &noise, &SigmaSpec::scalar(1.3, 1).unwrap(), 0.5).unwrap();
    assert_eq!(c.diff.sup_norm, 0.0);
    assert!(c.v.max_abs_diff(&c.v_g).unwrap() < 1e-14);
}
