//! Small-ball experiments: event detection on the scheme grid, plain and
//! importance-sampled probability estimates, exponent fits, and the scaling,
//! support and drift reductions.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::gaussian::GridScheme;
use crate::girsanov::{simulate_outcomes, summarize, Pinning, TiltSpec};
use crate::heat_kernel::{evaluate, KernelPoint};
use crate::solver::{support_reduction, DriftSpec, Model, PathRecord, SigmaSpec, Stepper, TargetPath};
use crate::stats::{self, LineFit};
use crate::white_noise::{path_seed, sample_noise, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Plain,
    Tilted,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Plain => "plain",
            Method::Tilted => "tilted",
        })
    }
}

/// Probability estimate with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallBallEstimate {
    pub p_hat: f64,
    /// Unclamped sample mean of `1_A·dP/dQ`.
    pub raw_mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub n_effective: f64,
    pub hits: usize,
    pub eps: f64,
    pub horizon: f64,
    pub length: f64,
    pub method: Method,
    pub warning: Option<String>,
    /// Per-path `dP/dQ`.
    #[serde(skip)]
    pub weights: Vec<f64>,
}

impl SmallBallEstimate {
    /// `−log p̂` and its delta-method standard error.
    pub fn neg_log(&self) -> Result<(f64, f64)> {
        if !(self.p_hat > 0.0) {
            return Err(Error::InsufficientData(format!(
                "no event hits at eps = {} (T = {})",
                self.eps, self.horizon
            )));
        }
        Ok((-self.p_hat.ln(), self.stderr / self.p_hat))
    }

    /// 95% intervals overlap.
    pub fn agrees_with(&self, other: &SmallBallEstimate) -> bool {
        stats::intervals_overlap(self.raw_mean, self.stderr, other.raw_mean, other.stderr, 1.96)
    }
}

#[derive(Debug, Clone)]
pub enum EventKind {
    /// `A_n`: `|u| ≤ ε` on `I_n` and `|u(t_{n+1})| ≤ ε/3`.
    Interval(usize),
    /// `F_n`: `|u(t_n, x_j)| ≤ ε` for all `j ≤ n₂ − 2`.
    GridPoints(usize),
    /// `A_0 ∩ … ∩ A_{n−1}`.
    IntervalChain(usize),
    /// `F_1 ∩ … ∩ F_n`.
    GridChain(usize),
    /// `|u| ≤ ε` at every recorded grid point.
    Ball,
    /// `|u − h| ≤ ε` at every recorded grid point.
    Tube(Arc<TargetPath>),
}

#[derive(Debug, Clone)]
pub struct EventSpec {
    pub kind: EventKind,
    pub radius: f64,
}

impl EventSpec {
    pub fn new(kind: EventKind, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::domain("radius", radius, "event radius must be positive"));
        }
        Ok(Self { kind, radius })
    }
}

/// Cells per block and steps per interval of the simulation grid.
fn embedding(grid: &Grid, scheme: &GridScheme) -> Result<(usize, usize)> {
    if (grid.length - scheme.length).abs() > 1e-12 * scheme.length {
        return Err(Error::Config(format!(
            "simulation circle {} differs from scheme circle {}",
            grid.length, scheme.length
        )));
    }
    if grid.n_x % scheme.blocks != 0 {
        return Err(Error::Config(format!(
            "{} cells do not divide into {} blocks",
            grid.n_x, scheme.blocks
        )));
    }
    let r = scheme.t1() / grid.dt();
    let spi = r.round();
    if spi < 1.0 || (r - spi).abs() > 1e-9 * r {
        return Err(Error::Config(format!(
            "interval {} is not a whole number of steps of {}",
            scheme.t1(),
            grid.dt()
        )));
    }
    Ok((grid.n_x / scheme.blocks, spi as usize))
}

fn interval_holds(path: &PathRecord, n: usize, spi: usize, eps: f64) -> Result<bool> {
    let end = (n + 1) * spi;
    if end >= path.snapshots.len() {
        return Err(Error::Config(format!("interval {n} extends past the simulated horizon")));
    }
    Ok(path.sup_per_snapshot[n * spi..=end].iter().all(|s| *s <= eps) && path.sup_per_snapshot[end] <= eps / 3.0)
}

fn grid_points_hold(path: &PathRecord, n: usize, ppb: usize, spi: usize, blocks: usize, eps: f64) -> Result<bool> {
    let snap = path
        .snapshots
        .get(n * spi)
        .ok_or_else(|| Error::Config(format!("time level {n} is past the simulated horizon")))?;
    Ok((0..blocks).all(|j| snap.norm_at(j * ppb) <= eps))
}

/// Evaluate an event exactly on the grid points of the simulation.
pub fn detect_event(path: &PathRecord, spec: &EventSpec, scheme: &GridScheme) -> Result<bool> {
    let eps = spec.radius;
    match &spec.kind {
        EventKind::Ball => Ok(path.sup_norm <= eps),
        EventKind::Tube(h) => {
            if h.grid != path.grid {
                return Err(Error::Config("target path is on a different grid".into()));
            }
            for (u, hn) in path.snapshots.iter().zip(&h.snapshots) {
                for m in 0..u.grid().n_x {
                    let d: f64 = u.point(m).iter().zip(hn.point(m)).map(|(a, b)| (a - b).powi(2)).sum();
                    if d.sqrt() > eps {
                        return Ok(false);
                    }
                }
            }
            Ok(true)
        }
        kind => {
            let (ppb, spi) = embedding(&path.grid, scheme)?;
            match kind {
                EventKind::Interval(n) => interval_holds(path, *n, spi, eps),
                EventKind::IntervalChain(k) => {
                    for n in 0..*k {
                        if !interval_holds(path, n, spi, eps)? {
                            return Ok(false);
                        }
                    }
                    Ok(true)
                }
                EventKind::GridPoints(n) => grid_points_hold(path, *n, ppb, spi, scheme.blocks, eps),
                EventKind::GridChain(k) => {
                    for n in 1..=*k {
                        if !grid_points_hold(path, n, ppb, spi, scheme.blocks, eps)? {
                            return Ok(false);
                        }
                    }
                    Ok(true)
                }
                EventKind::Ball | EventKind::Tube(_) => unreachable!(),
            }
        }
    }
}

/// Grid refinement, tilt strength and seed shared by the small-ball runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    /// Simulation cells per scheme block.
    pub points_per_block: usize,
    /// Largest cell width in units of `√t₁`; raises the cells per block when
    /// `θ` was rounded far up.
    pub max_cell: f64,
    /// Time steps per interval `t₁`.
    pub steps_per_interval: usize,
    /// Largest pointwise standard deviation the tilt aims for within an
    /// interval, as a fraction of `ε`.
    pub running_spread: f64,
    /// Standard deviation the tilt aims for at each `t_n`, as a fraction of
    /// `ε/3`.
    pub terminal_spread: f64,
    pub seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            points_per_block: 4,
            max_cell: 0.56,
            steps_per_interval: 32,
            running_spread: 0.5,
            terminal_spread: 0.5,
            seed: 0,
        }
    }
}

/// Tilt for a small-ball run: mode-wise linear feedback that draws the
/// profile towards zero at the end of every interval `t₁`, starting afresh
/// from the realized profile at each `t_n`.
pub fn smallball_tilt(model: &Model, scheme: &GridScheme, settings: &RunSettings) -> Result<TiltSpec> {
    let eps = scheme.eps;
    let scale = (model.sigma.c1 * model.sigma.c2).sqrt();
    let running = settings.running_spread * eps;
    // Targets below the one-step floor are unreachable; stay just above it.
    let terminal = (settings.terminal_spread * eps / 3.0).max(1.25 * Pinning::terminal_floor(&model.grid, scale));
    let mut pin = Pinning::for_targets(&model.grid, scheme.t1(), scale, running, terminal, 1.0)?;
    pin.cap = 8.0 * scale * pin.max_gain().max(1.0) * eps;
    Ok(TiltSpec::Pinning(pin))
}

impl RunSettings {
    /// Settings for the ball event over several intervals: no end-of-interval
    /// condition, so the tilt only pins loosely at each `t_n`.
    pub fn for_ball() -> Self {
        Self {
            running_spread: 0.4,
            terminal_spread: 1.5,
            ..Self::default()
        }
    }

    /// Simulation grid for `scheme` over `[0, T]`.
    pub fn grid(&self, scheme: &GridScheme, horizon: f64) -> Result<Grid> {
        if !(self.max_cell > 0.0) {
            return Err(Error::domain("max_cell", self.max_cell, "cell width bound must be positive"));
        }
        let cells = (scheme.length / (self.max_cell * scheme.t1().sqrt())).ceil() as usize;
        let ppb = self.points_per_block.max(cells.div_ceil(scheme.blocks));
        scheme.simulation_grid(horizon, ppb, self.steps_per_interval)
    }
}

fn check_start(u0: &Field, eps: f64) -> Result<()> {
    if u0.sup_norm() > eps / 3.0 {
        return Err(Error::Validation(format!(
            "initial profile sup {} exceeds eps/3 = {}",
            u0.sup_norm(),
            eps / 3.0
        )));
    }
    Ok(())
}

/// `P(A₀)` for a start `u0` with `|u0| ≤ ε/3`.
pub fn single_interval_probability(
    scheme: &GridScheme,
    sigma: &SigmaSpec,
    u0: Option<&Field>,
    n_paths: usize,
    tilted: bool,
    settings: &RunSettings,
) -> Result<SmallBallEstimate> {
    let grid = settings.grid(scheme, scheme.t1())?;
    let d = sigma.dim();
    let u0 = u0.cloned().unwrap_or_else(|| Field::zeros(grid.circle(), d));
    check_start(&u0, scheme.eps)?;
    let model = Model::new(grid, u0, sigma.clone(), DriftSpec::zero(d))?;
    let spec = EventSpec::new(EventKind::Interval(0), scheme.eps)?;
    let sch = *scheme;
    let event = move |p: &PathRecord| detect_event(p, &spec, &sch);
    let tilt = if tilted { Some(smallball_tilt(&model, scheme, settings)?) } else { None };
    let out = simulate_outcomes(&model, &[&event], tilt.as_ref(), n_paths, settings.seed)?;
    summarize(&out, 0, tilted, scheme.eps, &grid)
}

/// Ball and grid-point estimates over `[0, T]` from the same paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonEstimate {
    pub intervals: usize,
    /// `sup |u| ≤ ε` over all simulation grid points.
    pub ball: SmallBallEstimate,
    /// `F_1 ∩ … ∩ F_n`, the scheme points only.
    pub grid: SmallBallEstimate,
}

/// Tilted estimate of `P(sup_{[0,T]} |u| ≤ ε)` from `u ≡ 0`.
pub fn total_smallball_probability(
    scheme: &GridScheme,
    horizon: f64,
    sigma: &SigmaSpec,
    n_paths: usize,
    tilted: bool,
    settings: &RunSettings,
) -> Result<HorizonEstimate> {
    let grid = settings.grid(scheme, horizon)?;
    let intervals = scheme.intervals(horizon)?;
    let model = Model::centred(grid, sigma.clone())?;
    let ball = EventSpec::new(EventKind::Ball, scheme.eps)?;
    let chain = EventSpec::new(EventKind::GridChain(intervals), scheme.eps)?;
    let sch = *scheme;
    let e1 = |p: &PathRecord| detect_event(p, &ball, &sch);
    let e2 = |p: &PathRecord| detect_event(p, &chain, &sch);
    let tilt = if tilted { Some(smallball_tilt(&model, scheme, settings)?) } else { None };
    let out = simulate_outcomes(&model, &[&e1, &e2], tilt.as_ref(), n_paths, settings.seed)?;
    Ok(HorizonEstimate {
        intervals,
        ball: summarize(&out, 0, tilted, scheme.eps, &grid)?,
        grid: summarize(&out, 1, tilted, scheme.eps, &grid)?,
    })
}

/// Plain Monte Carlo `P(sup |u| ≤ ε)` for several radii from one set of
/// paths, so the estimates are monotone in `ε` path by path.
pub fn ball_curve(model: &Model, eps_list: &[f64], n_paths: usize, seed: u64) -> Result<Vec<SmallBallEstimate>> {
    let sups: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map_init(
            || Stepper::new(model.grid),
            |st, i| {
                let noise = sample_noise(model.grid, model.dim(), seed, i)?;
                Ok(model.run(st, &noise, None)?.sup_norm)
            },
        )
        .collect::<Result<_>>()?;
    eps_list
        .iter()
        .map(|&e| {
            let v: Vec<f64> = sups.iter().map(|s| if *s <= e { 1.0 } else { 0.0 }).collect();
            let p = stats::mean(&v);
            Ok(SmallBallEstimate {
                p_hat: p,
                raw_mean: p,
                stderr: stats::stderr(&v),
                n_paths,
                n_effective: n_paths as f64,
                hits: v.iter().filter(|x| **x > 0.0).count(),
                eps: e,
                horizon: model.grid.horizon,
                length: model.grid.length,
                method: Method::Plain,
                warning: None,
                weights: Vec::new(),
            })
        })
        .collect()
}

/// Weighted fit of `log(−log p̂)` against `log(1/ε)`.
pub fn exponent_fit(estimates: &[SmallBallEstimate]) -> Result<LineFit> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    for e in estimates {
        let (nl, se) = e.neg_log()?;
        if !(nl > 0.0) {
            return Err(Error::InsufficientData(format!("p_hat = 1 at eps = {}", e.eps)));
        }
        x.push((1.0 / e.eps).ln());
        y.push(nl.ln());
        let s = (se / nl).max(1e-6);
        w.push(1.0 / (s * s));
    }
    stats::weighted_line_fit(&x, &y, &w)
}

/// Weighted fit of `−log p̂` against `T`.
pub fn additivity_fit(estimates: &[SmallBallEstimate]) -> Result<LineFit> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    for e in estimates {
        let (nl, se) = e.neg_log()?;
        x.push(e.horizon);
        y.push(nl);
        let s = se.max(1e-6);
        w.push(1.0 / (s * s));
    }
    stats::weighted_line_fit(&x, &y, &w)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub length: f64,
    pub direct: SmallBallEstimate,
    pub unit: SmallBallEstimate,
    /// Estimates agree within joint 95% bounds.
    pub agree: bool,
    /// Largest relative error of `G¹(t/J², x/J) = J·G^J(t, x)` on test points.
    pub kernel_max_rel_error: f64,
}

/// Compare `P(sup |u| ≤ ε)` on `[0, J]` over `[0, T]` with the unit-circle
/// problem at radius `εJ^{−1/2}`, horizon `T/J²` and coefficient
/// `σ^{(J)}`. Both runs use the same cell counts and independent noise.
#[allow(clippy::too_many_arguments)]
pub fn verify_scaling_reduction(
    length: f64,
    eps: f64,
    horizon: f64,
    sigma: &SigmaSpec,
    n_x: usize,
    n_t: usize,
    n_paths: usize,
    seed: u64,
) -> Result<ScalingReport> {
    let direct_grid = Grid::new(length, horizon, n_x, n_t)?;
    let unit_grid = Grid::new(1.0, horizon / (length * length), n_x, n_t)?;
    let direct_model = Model::centred(direct_grid, sigma.clone())?;
    let unit_model = Model::centred(unit_grid, sigma.rescaled(length))?;
    let r_unit = eps / length.sqrt();
    let direct = ball_curve(&direct_model, &[eps], n_paths, path_seed(seed, 1))?.remove(0);
    let unit = ball_curve(&unit_model, &[r_unit], n_paths, path_seed(seed, 2))?.remove(0);
    let mut worst: f64 = 0.0;
    for &(t, x) in &[(0.1, 0.3), (0.01, 0.05), (1.0, 0.7), (0.003, 1.2)] {
        let x = x * length / 2.0;
        let lhs = evaluate(KernelPoint::new(t / (length * length), x / length, 1.0))?;
        let rhs = length * evaluate(KernelPoint::new(t, x, length))?;
        if rhs > 1e-300 {
            worst = worst.max((lhs - rhs).abs() / rhs);
        }
    }
    Ok(ScalingReport {
        length,
        agree: stats::within_joint(direct.raw_mean, direct.stderr, unit.raw_mean, unit.stderr, 1.96),
        direct,
        unit,
        kernel_max_rel_error: worst,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportReport {
    pub direct: SmallBallEstimate,
    pub reduced: SmallBallEstimate,
    pub agree: bool,
    /// Largest `|(u − h) − (w + u₀ − h₀)|` over the coupled paths.
    pub identity_error: f64,
    /// The tube event and the reduced ball event coincide on every coupled path.
    pub events_match: bool,
    pub coupled_paths: usize,
}

/// Tube probability `P(sup |u − h| ≤ ε)` estimated directly and through the
/// centred problem for `w = u − u₀ − h + h₀`, plus a pathwise check of the
/// identity on `coupled` paths driven by shared noise.
#[allow(clippy::too_many_arguments)]
pub fn support_theorem_run(
    u0: &Field,
    h: &TargetPath,
    eps: f64,
    sigma: &SigmaSpec,
    drift: &DriftSpec,
    n_paths: usize,
    coupled: usize,
    seed: u64,
) -> Result<SupportReport> {
    let grid = h.grid;
    let mut gap = u0.clone();
    gap.axpy(-1.0, &h.snapshots[0])?;
    if !(gap.sup_norm() < eps / 2.0) {
        return Err(Error::Validation(format!(
            "sup |u0 - h(0)| = {} is not below eps/2 = {}",
            gap.sup_norm(),
            eps / 2.0
        )));
    }
    let red = support_reduction(u0, h, drift, sigma)?;
    let direct_model = Model::new(grid, u0.clone(), sigma.clone(), drift.clone())?;
    let reduced_model = Model::new(grid, red.w0.clone(), red.sigma1.clone(), red.drift())?;
    let h = Arc::new(h.clone());
    let tube = EventSpec::new(EventKind::Tube(Arc::clone(&h)), eps)?;
    let offset = red.offset.clone();
    let direct_event = |p: &PathRecord| {
        let dummy = GridScheme {
            eps,
            c0: 1.0,
            theta: 1.0,
            c1: 1.0,
            length: grid.length,
            blocks: 1,
        };
        detect_event(p, &tube, &dummy)
    };
    let reduced_event = |p: &PathRecord| Ok(reduced_tube(p, &offset, eps));
    let d = simulate_outcomes(&direct_model, &[&direct_event], None, n_paths, path_seed(seed, 1))?;
    let r = simulate_outcomes(&reduced_model, &[&reduced_event], None, n_paths, path_seed(seed, 2))?;
    let direct = summarize(&d, 0, false, eps, &grid)?;
    let reduced = summarize(&r, 0, false, eps, &grid)?;

    let mut identity_error: f64 = 0.0;
    let mut events_match = true;
    let mut st = Stepper::new(grid);
    for i in 0..coupled as u64 {
        let noise = sample_noise(grid, u0.dim(), path_seed(seed, 3), i)?;
        let pu = direct_model.run(&mut st, &noise, None)?;
        let pw = reduced_model.run(&mut st, &noise, None)?;
        for n in 0..=grid.n_t {
            for (k, (&u, &w)) in pu.snapshots[n].values().iter().zip(pw.snapshots[n].values()).enumerate() {
                let lhs = u - h.snapshots[n].values()[k];
                let rhs = w + offset.values()[k];
                identity_error = identity_error.max((lhs - rhs).abs());
            }
        }
        events_match &= direct_event(&pu)? == reduced_tube(&pw, &offset, eps);
    }
    Ok(SupportReport {
        agree: stats::intervals_overlap(direct.raw_mean, direct.stderr, reduced.raw_mean, reduced.stderr, 1.96),
        direct,
        reduced,
        identity_error,
        events_match,
        coupled_paths: coupled,
    })
}

fn reduced_tube(p: &PathRecord, offset: &Field, eps: f64) -> bool {
    p.snapshots.iter().all(|w| {
        (0..w.grid().n_x).all(|m| {
            let d: f64 = w.point(m).iter().zip(offset.point(m)).map(|(a, b)| (a + b).powi(2)).sum();
            d.sqrt() <= eps
        })
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReductionReport {
    /// Ball probability with the drift present.
    pub with_drift: SmallBallEstimate,
    /// Ball probability with the drift removed.
    pub without_drift: SmallBallEstimate,
    /// Bound `M` on `|σ⁻¹g|`.
    pub m: f64,
    /// `exp(M²TJ/2)`.
    pub factor: f64,
    /// `Q(A) ≤ √P(A)·exp(M²TJ/2)` within 3 standard errors.
    pub forward_ok: bool,
    /// The same with the roles exchanged.
    pub reverse_ok: bool,
}

/// Compare the ball probability with drift `g` against the one without, and
/// check the Cauchy–Schwarz bound linking them in both directions.
pub fn g_reduction_check(
    drift: &DriftSpec,
    sigma: &SigmaSpec,
    eps: f64,
    grid: Grid,
    n_paths: usize,
    seed: u64,
) -> Result<DriftReductionReport> {
    let d = sigma.dim();
    let with = Model::new(grid, Field::zeros(grid.circle(), d), sigma.clone(), drift.clone())?;
    let without = Model::centred(grid, sigma.clone())?;
    let q = ball_curve(&with, &[eps], n_paths, path_seed(seed, 1))?.remove(0);
    let p = ball_curve(&without, &[eps], n_paths, path_seed(seed, 2))?.remove(0);
    let m = drift.bound / sigma.c1;
    let factor = (0.5 * m * m * grid.horizon * grid.length).exp();
    let ok = |a: &SmallBallEstimate, b: &SmallBallEstimate| {
        a.raw_mean - 3.0 * a.stderr <= (b.raw_mean + 3.0 * b.stderr).max(0.0).sqrt() * factor
    };
    Ok(DriftReductionReport {
        forward_ok: ok(&q, &p),
        reverse_ok: ok(&p, &q),
        with_drift: q,
        without_drift: p,
        m,
        factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::white_noise::NoisePath;

    fn scheme() -> GridScheme {
        GridScheme::new(0.4, 0.5, 2.0, 1.0).unwrap()
    }

    fn zero_path(s: &GridScheme, intervals: usize) -> PathRecord {
        let grid = s.simulation_grid(intervals as f64 * s.t1(), 4, 8).unwrap();
        let noise = NoisePath::from_increments(grid, 1, 0, vec![0.0; grid.n_x * grid.n_t]).unwrap();
        let model = Model::centred(grid, SigmaSpec::identity(1).unwrap()).unwrap();
        model.run(&mut Stepper::new(grid), &noise, None).unwrap()
    }

    #[test]
    fn zero_path_satisfies_everything() {
        let s = scheme();
        let p = zero_path(&s, 2);
        for kind in [
            EventKind::Interval(0),
            EventKind::Interval(1),
            EventKind::GridPoints(2),
            EventKind::IntervalChain(2),
            EventKind::GridChain(2),
            EventKind::Ball,
        ] {
            assert!(detect_event(&p, &EventSpec::new(kind, 0.1).unwrap(), &s).unwrap());
        }
    }

    #[test]
    fn one_bad_grid_value_breaks_f() {
        let s = scheme();
        let mut p = zero_path(&s, 1);
        let spi = 8;
        let ppb = 4;
        p.snapshots[spi].set(2 * ppb, 0, 2.0 * s.eps);
        let f = EventSpec::new(EventKind::GridPoints(1), s.eps).unwrap();
        assert!(!detect_event(&p, &f, &s).unwrap());
        // Off-grid points do not enter F.
        let mut q = zero_path(&s, 1);
        q.snapshots[spi].set(2 * ppb + 1, 0, 2.0 * s.eps);
        assert!(detect_event(&q, &f, &s).unwrap());
    }

    #[test]
    fn non_embedded_grid_is_rejected() {
        let s = scheme();
        let grid = Grid::new(1.0, s.t1(), 4 * s.blocks + 1, 8).unwrap();
        let noise = NoisePath::from_increments(grid, 1, 0, vec![0.0; grid.n_x * grid.n_t]).unwrap();
        let model = Model::centred(grid, SigmaSpec::identity(1).unwrap()).unwrap();
        let p = model.run(&mut Stepper::new(grid), &noise, None).unwrap();
        let a = EventSpec::new(EventKind::Interval(0), 0.1).unwrap();
        assert!(matches!(detect_event(&p, &a, &s), Err(Error::Config(_))));
    }

    #[test]
    fn start_outside_third_is_rejected() {
        let s = scheme();
        let grid = s.simulation_grid(s.t1(), 4, 8).unwrap();
        let u0 = Field::constant(grid.circle(), &[s.eps / 2.0]);
        let r = single_interval_probability(&s, &SigmaSpec::identity(1).unwrap(), Some(&u0), 10, false, &RunSettings::default());
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}
