use smallball::experiments::{
    ball_curve, detect_event, g_reduction_check, support_theorem_run, verify_scaling_reduction, EventKind, EventSpec,
    RunSettings,
};
use smallball::gaussian::GridScheme;
use smallball::solver::{Stepper, TargetPath};
use smallball::white_noise::{path_seed, sample_noise};
use smallball::{DriftSpec, Field, Grid, Model, SigmaSpec};

#[test]
fn interval_chain_implies_ball_pathwise() {
    let scheme = GridScheme::new(0.6, 0.5, 5.0, 1.0).unwrap();
    let grid = RunSettings::default().grid(&scheme, 2.0 * scheme.t1()).unwrap();
    let model = Model::centred(grid, SigmaSpec::identity(1).unwrap()).unwrap();
    let chain = EventSpec::new(EventKind::IntervalChain(2), 0.9).unwrap();
    let first = EventSpec::new(EventKind::Interval(0), 0.9).unwrap();
    let ball = EventSpec::new(EventKind::Ball, 0.9).unwrap();
    let grid_chain = EventSpec::new(EventKind::GridChain(2), 0.9).unwrap();
    // Radius above the scheme's so the chain is not rare.
    let mut st = Stepper::new(grid);
    let mut hits = [0usize; 3];
    for i in 0..600 {
        let noise = sample_noise(grid, 1, 77, i).unwrap();
        let p = model.run(&mut st, &noise, None).unwrap();
        let c = detect_event(&p, &chain, &scheme).unwrap();
        let a0 = detect_event(&p, &first, &scheme).unwrap();
        let b = detect_event(&p, &ball, &scheme).unwrap();
        let f = detect_event(&p, &grid_chain, &scheme).unwrap();
        assert!(!c || (a0 && b), "path {i}");
        assert!(!b || f, "path {i}");
        hits[0] += c as usize;
        hits[1] += b as usize;
        hits[2] += f as usize;
    }
    assert!(hits[0] > 0 && hits[0] <= hits[1] && hits[1] <= hits[2], "{hits:?}");
}

#[test]
fn ball_probability_monotone_and_saturating() {
    let grid = Grid::new(1.0, 0.02, 32, 40).unwrap();
    let model = Model::centred(grid, SigmaSpec::identity(1).unwrap()).unwrap();
    let eps = [0.2, 0.3, 0.4, 0.5, 0.7, 5.0];
    let curve = ball_curve(&model, &eps, 1500, 4).unwrap();
    for w in curve.windows(2) {
        assert!(w[0].p_hat <= w[1].p_hat);
    }
    assert_eq!(curve.last().unwrap().p_hat, 1.0);
    assert!(curve.iter().all(|e| e.stderr >= 0.0 && e.n_effective <= e.n_paths as f64));
}

#[test]
fn unit_length_scaling_is_trivial() {
    let sigma = SigmaSpec::identity(1).unwrap();
    let r = verify_scaling_reduction(1.0, 0.4, 0.02, &sigma, 32, 40, 3000, 9).unwrap();
    assert!(r.agree, "{} vs {}", r.direct.p_hat, r.unit.p_hat);
    assert!(r.kernel_max_rel_error < 1e-12);
}

#[test]
fn zero_target_tube_is_the_ball() {
    let grid = Grid::new(1.0, 0.02, 16, 20).unwrap();
    let sigma = SigmaSpec::identity(1).unwrap();
    let u0 = Field::zeros(grid.circle(), 1);
    let h = TargetPath::zero(grid, 1);
    let r = support_theorem_run(&u0, &h, 0.4, &sigma, &DriftSpec::zero(1), 1000, 10, 2).unwrap();
    let ball = ball_curve(&Model::centred(grid, sigma).unwrap(), &[0.4], 1000, path_seed(2, 1)).unwrap();
    assert_eq!(r.direct.p_hat, ball[0].p_hat);
    assert!(r.events_match && r.identity_error == 0.0);
}

#[test]
fn support_run_rejects_distant_start() {
    let grid = Grid::new(1.0, 0.02, 16, 20).unwrap();
    let u0 = Field::constant(grid.circle(), &[0.25]);
    let h = TargetPath::zero(grid, 1);
    let sigma = SigmaSpec::identity(1).unwrap();
    assert!(support_theorem_run(&u0, &h, 0.4, &sigma, &DriftSpec::zero(1), 10, 1, 0).is_err());
}

#[test]
fn drift_reduction_bound() {
    let grid = Grid::new(1.0, 0.02, 16, 20).unwrap();
    let sigma = SigmaSpec::identity(1).unwrap();
    let none = g_reduction_check(&DriftSpec::zero(1), &sigma, 0.4, grid, 2000, 5).unwrap();
    assert_eq!(none.factor, 1.0);
    assert!(none.with_drift.agrees_with(&none.without_drift));
    let some = g_reduction_check(&DriftSpec::constant(vec![2.0]), &sigma, 0.4, grid, 2000, 5).unwrap();
    assert!(some.forward_ok && some.reverse_ok, "{some:?}");
    assert!(some.with_drift.p_hat <= some.without_drift.p_hat + 3.0 * some.without_drift.stderr);
}
