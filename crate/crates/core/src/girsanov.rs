//! Change of measure for the driving noise.
//!
//! A bounded predictable control `f` turns the white noise `W` into
//! `W̃ = W − ∫f`, a white noise under `Q` with
//!
//! ```text
//! dQ/dP = exp(Z¹ − Z²/2),   Z¹ = ∫∫ f·dW,   Z² = ∫∫ |f|² dx ds.
//! ```
//!
//! Paths are simulated under `Q` by adding `f·dt·dx` to each sampled cell;
//! the reverse density is then `dP/dQ = exp(−Z̃¹ − Z²/2)` with `Z̃¹`
//! integrated against the sampled (tilted-measure) increments.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{Method, SmallBallEstimate};
use crate::field::Field;
use crate::solver::{clamp_f_eps, DriftSpec, Model, PathRecord, SigmaSpec, Stepper};
use crate::spectral::{HeatPropagator, Workspace};
use crate::white_noise::{sample_noise, Grid, NoisePath};

/// Girsanov sums along one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GirsanovWeight {
    pub z1: f64,
    pub z2: f64,
    /// Declared bound `M` on `|f|`.
    pub bound: f64,
}

impl GirsanovWeight {
    pub fn new(z1: f64, z2: f64, bound: f64) -> Self {
        Self { z1, z2, bound }
    }

    /// `log dQ/dP = Z¹ − Z²/2`, with `Z¹` taken against reference-measure noise.
    pub fn log_weight(&self) -> f64 {
        self.z1 - 0.5 * self.z2
    }

    pub fn weight(&self) -> f64 {
        self.log_weight().exp()
    }

    /// `log dP/dQ = −Z̃¹ − Z²/2`, with `Z̃¹` taken against tilted-measure noise.
    pub fn log_reverse(&self) -> f64 {
        -self.z1 - 0.5 * self.z2
    }

    pub fn reverse_weight(&self) -> f64 {
        self.log_reverse().exp()
    }

    /// `M²·t·J`.
    pub fn energy_bound(&self, t: f64, length: f64) -> f64 {
        self.bound * self.bound * t * length
    }
}

/// Control values on the noise cells, laid out like [`NoisePath`].
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    grid: Grid,
    dim: usize,
    values: Vec<f64>,
}

impl ControlPath {
    pub fn new(grid: Grid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![0.0; grid.n_t * grid.n_x * dim],
        }
    }

    /// Constant control `c` on every cell.
    pub fn constant(grid: Grid, value: &[f64]) -> Self {
        let mut out = Self::new(grid, value.len());
        for chunk in out.values.chunks_mut(value.len()) {
            chunk.copy_from_slice(value);
        }
        out
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let w = self.grid.n_x * self.dim;
        &self.values[n * w..(n + 1) * w]
    }

    pub fn row_mut(&mut self, n: usize) -> &mut [f64] {
        let w = self.grid.n_x * self.dim;
        &mut self.values[n * w..(n + 1) * w]
    }

    /// Largest `|f|` over cells.
    pub fn sup_norm(&self) -> f64 {
        self.values
            .chunks(self.dim)
            .map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// `Z¹ = Σ f·ΔW`, `Z² = Σ |f|²·dt·dx` over all cells.
pub fn accumulate_weight(controls: &ControlPath, noise: &NoisePath, bound: f64) -> Result<GirsanovWeight> {
    if controls.grid() != noise.grid() || controls.dim() != noise.dim() {
        return Err(Error::Dimension("control and noise grids differ".into()));
    }
    let sup = controls.sup_norm();
    if !(sup <= bound * (1.0 + 1e-12)) {
        return Err(Error::Validation(format!("|f| = {sup} exceeds declared bound M = {bound}")));
    }
    let cell = noise.grid().cell_variance();
    let mut z1 = 0.0;
    let mut z2 = 0.0;
    for (f, xi) in controls.values().iter().zip(noise.increments()) {
        z1 += f * xi;
        z2 += f * f * cell;
    }
    Ok(GirsanovWeight::new(z1, z2, bound))
}

/// Lower-bound steering field `f(s, y, u) = −σ⁻¹(s, y, u)·(S_s u₀)(y)/t₁` for
/// `s < t₁`, zero afterwards. Under the tilted dynamics the mean of `u`
/// is `(1 − t/t₁)·S_t u₀`, which vanishes at `t₁`.
pub fn lower_bound_drift(u0: &Field, t1: f64, sigma: &SigmaSpec, grid: &Grid) -> Result<DriftSpec> {
    if !(t1 > 0.0) {
        return Err(Error::domain("t1", t1, "interval length must be positive"));
    }
    if u0.grid() != &grid.circle() || sigma.dim() != u0.dim() {
        return Err(Error::Dimension("u0, sigma and grid do not match".into()));
    }
    let d = u0.dim();
    let prop = HeatPropagator::new(grid.circle(), grid.dt());
    let steps = (t1 / grid.dt()).round() as usize;
    let mut targets = Vec::with_capacity(steps.min(grid.n_t) + 1);
    let mut cur = u0.clone();
    for _ in 0..=steps.min(grid.n_t) {
        let next = prop.semigroup(&cur, grid.dt())?;
        targets.push(std::mem::replace(&mut cur, next));
    }
    // Fail early on a singular coefficient along the starting profile.
    let mut y = vec![0.0; d];
    for m in 0..grid.n_x {
        sigma.solve(0.0, grid.circle().x(m), u0.point(m), u0.point(m), &mut y)?;
    }
    let bound = u0.sup_norm() / (t1 * sigma.c1);
    let (dt, dx, n_x) = (grid.dt(), grid.dx(), grid.n_x);
    let sigma = sigma.clone();
    Ok(DriftSpec::custom(d, bound, move |t, x, u, out| {
        if t >= t1 - 0.5 * dt {
            out.fill(0.0);
            return;
        }
        let n = ((t / dt).round() as usize).min(targets.len() - 1);
        let m = ((x / dx).round() as isize).rem_euclid(n_x as isize) as usize;
        let v: Vec<f64> = targets[n].point(m).iter().map(|a| -a / t1).collect();
        if sigma.solve(t, x, u, &v, out).is_err() {
            out.fill(f64::NAN);
        }
    }))
}

/// Bounded restoring feedback `f = −κ·σ⁻¹(t, x, u)·f_r(u)`, with `f_r` the
/// radial clamp at radius `r`. Pulls the tilted path towards zero.
pub fn restoring_drift(sigma: &SigmaSpec, gain: f64, radius: f64) -> Result<DriftSpec> {
    if !(gain >= 0.0) || !(radius > 0.0) {
        return Err(Error::Argument(format!(
            "restoring tilt needs gain >= 0 and radius > 0, got {gain}, {radius}"
        )));
    }
    let d = sigma.dim();
    let bound = gain * radius / sigma.c1;
    let sigma = sigma.clone();
    Ok(DriftSpec::custom(d, bound, move |t, x, u, out| {
        let mut c = vec![0.0; u.len()];
        clamp_f_eps(u, radius, &mut c);
        c.iter_mut().for_each(|v| *v *= -gain);
        if sigma.solve(t, x, u, &c, out).is_err() {
            out.fill(f64::NAN);
        }
    }))
}

/// `f = sign·σ⁻¹(t, x, u)·g(t, x, u)`. With `sign = −1` the tilt removes the
/// drift `g` from the dynamics.
pub fn sigma_inverse_drift(drift: &DriftSpec, sigma: &SigmaSpec, sign: f64) -> Result<DriftSpec> {
    if drift.dim() != sigma.dim() {
        return Err(Error::Dimension("drift and sigma dimensions differ".into()));
    }
    let bound = sign.abs() * drift.bound / sigma.c1;
    let (g, s) = (drift.clone(), sigma.clone());
    Ok(DriftSpec::custom(drift.dim(), bound, move |t, x, u, out| {
        let mut v = vec![0.0; u.len()];
        g.eval(t, x, u, &mut v);
        v.iter_mut().for_each(|a| *a *= sign);
        if s.solve(t, x, u, &v, out).is_err() {
            out.fill(f64::NAN);
        }
    }))
}

/// A predictable tilt of the noise.
#[derive(Debug, Clone)]
pub enum TiltSpec {
    /// `f(t, x, u)` evaluated on the current state.
    Drift(DriftSpec),
    /// Lower-bound steering rebuilt every `t1` from the clamped realized
    /// profile, with target zero at the end of each interval.
    Retilt { t1: f64, radius: f64 },
    /// Mode-wise linear feedback, restarted every period.
    Pinning(Pinning),
    Sum(Vec<TiltSpec>),
}

/// Linear feedback obtained from the Gaussian twist
/// `exp(−q·Σₙ‖uₙ‖²dt/2 − γ‖u_N‖²/2)` of each period, in Fourier modes.
/// Gains come from the discrete Riccati recursion of the exponential
/// Euler scheme, so under the tilted law every mode stays Gaussian.
#[derive(Debug, Clone)]
pub struct Pinning {
    pub period: f64,
    pub running: f64,
    pub terminal: f64,
    pub scale: f64,
    /// Cap on the pointwise norm of the control.
    pub cap: f64,
    grid: Grid,
    steps: usize,
    /// `gains[n·n_x + k]`.
    gains: Arc<Vec<f64>>,
}

fn riccati_gains(lambdas: &[f64], dt: f64, steps: usize, scale: f64, running: f64, terminal: f64) -> Vec<f64> {
    let nx = lambdas.len();
    let s2 = scale * scale;
    let mut gains = vec![0.0; steps * nx];
    for (k, &l) in lambdas.iter().enumerate() {
        let q = (-2.0 * l * dt).exp();
        let mut p = terminal;
        for n in (0..steps).rev() {
            let r = p * q / (1.0 + p * q * s2 * dt);
            gains[n * nx + k] = r;
            p = running * dt + r;
        }
    }
    gains
}

/// Pointwise standard deviation `(max over the period, at the end)` of the
/// tilted dynamics started from zero.
fn tilted_spread(lambdas: &[f64], dt: f64, steps: usize, scale: f64, length: f64, gains: &[f64]) -> (f64, f64) {
    let nx = lambdas.len();
    let s2 = scale * scale;
    let mut var = vec![0.0; steps + 1];
    for (k, &l) in lambdas.iter().enumerate() {
        let q = (-2.0 * l * dt).exp();
        let mut v = 0.0;
        for n in 0..steps {
            let c = 1.0 - s2 * dt * gains[n * nx + k];
            v = q * (c * c * v + s2 * dt);
            var[n + 1] += v / length;
        }
    }
    let max = var.iter().cloned().fold(0.0, f64::max);
    (max.sqrt(), var[steps].sqrt())
}

fn bisect_precision(target: f64, spread: impl Fn(f64) -> f64) -> Result<f64> {
    if spread(0.0) <= target {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (1e-12f64, 1.0f64);
    while spread(hi) > target {
        hi *= 4.0;
        if hi > 1e30 {
            return Err(Error::Argument(format!("target spread {target} is not reachable")));
        }
    }
    for _ in 0..100 {
        let mid = (lo * hi).sqrt();
        if spread(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

impl Pinning {
    pub fn new(grid: &Grid, period: f64, scale: f64, running: f64, terminal: f64, cap: f64) -> Result<Self> {
        if !(period > 0.0 && scale > 0.0 && running >= 0.0 && terminal >= 0.0 && cap > 0.0) {
            return Err(Error::Argument(format!(
                "pinning needs positive period, scale and cap and non-negative precisions, got {period}, {scale}, {running}, {terminal}, {cap}"
            )));
        }
        let steps = whole_steps(period, grid.dt())?;
        let lambdas = pinning_eigenvalues(grid);
        let gains = riccati_gains(&lambdas, grid.dt(), steps, scale, running, terminal);
        Ok(Self {
            period,
            running,
            terminal,
            scale,
            cap,
            grid: *grid,
            steps,
            gains: Arc::new(gains),
        })
    }

    /// Choose the precisions so that, started from zero, the largest
    /// pointwise standard deviation over a period is `running_sd` and the one
    /// at its end is `terminal_sd`.
    pub fn for_targets(grid: &Grid, period: f64, scale: f64, running_sd: f64, terminal_sd: f64, cap: f64) -> Result<Self> {
        if !(running_sd > 0.0 && terminal_sd > 0.0) {
            return Err(Error::Argument(format!(
                "target spreads must be positive, got {running_sd}, {terminal_sd}"
            )));
        }
        let steps = whole_steps(period, grid.dt())?;
        let lambdas = pinning_eigenvalues(grid);
        let dt = grid.dt();
        let spread = |q: f64, g: f64| {
            let gains = riccati_gains(&lambdas, dt, steps, scale, q, g);
            tilted_spread(&lambdas, dt, steps, scale, grid.length, &gains)
        };
        let running = bisect_precision(running_sd, |q| spread(q, 0.0).0)?;
        let terminal = bisect_precision(terminal_sd, |g| spread(running, g).1)?;
        Self::new(grid, period, scale, running, terminal, cap)
    }

    /// Pointwise standard deviation left by the last step of a period, which
    /// no feedback can remove: the lowest reachable terminal spread.
    pub fn terminal_floor(grid: &Grid, scale: f64) -> f64 {
        let dt = grid.dt();
        let var: f64 = pinning_eigenvalues(grid).iter().map(|l| (-2.0 * l * dt).exp() * scale * scale * dt).sum();
        (var / grid.length).sqrt()
    }

    /// Largest feedback gain, for sizing the cap.
    pub fn max_gain(&self) -> f64 {
        self.gains.iter().cloned().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.running == 0.0 && self.terminal == 0.0
    }
}

fn pinning_eigenvalues(grid: &Grid) -> Vec<f64> {
    let c = grid.circle();
    (0..c.n_x).map(|k| crate::spectral::eigenvalue(c, k)).collect()
}

impl TiltSpec {
    pub fn is_zero(&self) -> bool {
        match self {
            TiltSpec::Drift(d) => d.is_zero(),
            TiltSpec::Retilt { .. } => false,
            TiltSpec::Pinning(p) => p.is_zero(),
            TiltSpec::Sum(parts) => parts.iter().all(TiltSpec::is_zero),
        }
    }

    /// Declared bound on `|f|` for a coefficient with lower ellipticity `c1`.
    pub fn bound(&self, c1: f64) -> f64 {
        match self {
            TiltSpec::Drift(d) => d.bound,
            TiltSpec::Retilt { t1, radius } => radius / (t1 * c1),
            TiltSpec::Pinning(p) => p.cap,
            TiltSpec::Sum(parts) => parts.iter().map(|p| p.bound(c1)).sum(),
        }
    }

    /// Per-path controller.
    pub fn start(&self, prop: HeatPropagator, sigma: SigmaSpec, dim: usize) -> Result<TiltState> {
        let mut parts = Vec::new();
        self.collect(&prop, &mut parts)?;
        let bound = self.bound(sigma.c1);
        Ok(TiltState {
            parts,
            ws: prop.workspace(),
            prop,
            bound,
            sigma,
            dim,
        })
    }

    fn collect(&self, prop: &HeatPropagator, out: &mut Vec<Part>) -> Result<()> {
        match self {
            TiltSpec::Drift(d) => {
                if !d.is_zero() {
                    out.push(Part::Drift(d.clone()))
                }
            }
            TiltSpec::Retilt { t1, radius } => {
                if !(*t1 > 0.0 && *radius > 0.0) {
                    return Err(Error::Argument(format!("retilt needs t1 > 0 and radius > 0, got {t1}, {radius}")));
                }
                out.push(Part::Retilt {
                    steps: whole_steps(*t1, prop.dt())?,
                    t1: *t1,
                    radius: *radius,
                    target: None,
                });
            }
            TiltSpec::Pinning(p) => {
                if p.grid.circle() != *prop.grid() || (p.grid.dt() - prop.dt()).abs() > 1e-12 * prop.dt() {
                    return Err(Error::Config("pinning tilt was built for a different grid".into()));
                }
                if !p.is_zero() {
                    out.push(Part::Pinning {
                        spec: p.clone(),
                        pull: Field::zeros(*prop.grid(), 1),
                        factors: vec![0.0; prop.grid().n_x],
                    });
                }
            }
            TiltSpec::Sum(parts) => {
                for p in parts {
                    p.collect(prop, out)?;
                }
            }
        }
        Ok(())
    }
}

fn whole_steps(period: f64, dt: f64) -> Result<usize> {
    let steps = (period / dt).round();
    if steps < 1.0 || (steps * dt - period).abs() > 1e-9 * period {
        return Err(Error::Config(format!(
            "tilt period {period} is not a whole number of steps of {dt}"
        )));
    }
    Ok(steps as usize)
}

#[derive(Debug)]
enum Part {
    Drift(DriftSpec),
    Pinning {
        spec: Pinning,
        pull: Field,
        factors: Vec<f64>,
    },
    Retilt {
        steps: usize,
        t1: f64,
        radius: f64,
        target: Option<Field>,
    },
}

/// Running state of a [`TiltSpec`] along one path.
#[derive(Debug)]
pub struct TiltState {
    parts: Vec<Part>,
    prop: HeatPropagator,
    ws: Workspace,
    sigma: SigmaSpec,
    bound: f64,
    dim: usize,
}

impl TiltState {
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Write the control for step `n` (time `t`) given the current profile.
    pub fn fill(&mut self, n: usize, t: f64, profile: &Field, out: &mut Field) -> Result<()> {
        profile.same_shape(out)?;
        let grid = *profile.grid();
        let d = profile.dim();
        out.values_mut().fill(0.0);
        if d != self.dim {
            return Err(Error::Dimension(format!("tilt built for dimension {}, profile has {d}", self.dim)));
        }
        let mut v = vec![0.0; d];
        let mut y = vec![0.0; d];
        for part in self.parts.iter_mut() {
            match part {
                Part::Drift(spec) => {
                    for m in 0..grid.n_x {
                        spec.eval(t, grid.x(m), profile.point(m), &mut y);
                        for (o, a) in out.point_mut(m).iter_mut().zip(&y) {
                            *o += a;
                        }
                    }
                }
                Part::Retilt {
                    steps,
                    t1,
                    radius,
                    target,
                } => {
                    let next = match target.take() {
                        Some(prev) if n % *steps != 0 => self.prop.semigroup(&prev, self.prop.dt())?,
                        _ => {
                            let mut c = Field::zeros(grid, d);
                            for m in 0..grid.n_x {
                                clamp_f_eps(profile.point(m), *radius, c.point_mut(m));
                            }
                            c
                        }
                    };
                    for m in 0..grid.n_x {
                        for (a, b) in v.iter_mut().zip(next.point(m)) {
                            *a = -b / *t1;
                        }
                        self.sigma.solve(t, grid.x(m), profile.point(m), &v, &mut y)?;
                        for (o, a) in out.point_mut(m).iter_mut().zip(&y) {
                            *o += a;
                        }
                    }
                    *target = Some(next);
                }
                Part::Pinning { spec, pull, factors } => {
                    let nx = grid.n_x;
                    let row = n % spec.steps;
                    let k2 = spec.scale * spec.scale;
                    for (f, g) in factors.iter_mut().zip(&spec.gains[row * nx..(row + 1) * nx]) {
                        *f = -k2 * g;
                    }
                    if pull.dim() != d {
                        *pull = Field::zeros(grid, d);
                    }
                    self.prop.apply_factors(profile, factors, pull, &mut self.ws)?;
                    for m in 0..nx {
                        self.sigma.solve(t, grid.x(m), profile.point(m), pull.point(m), &mut y)?;
                        let nrm = y.iter().map(|a| a * a).sum::<f64>().sqrt();
                        let shrink = if nrm > spec.cap { spec.cap / nrm } else { 1.0 };
                        for (o, a) in out.point_mut(m).iter_mut().zip(&y) {
                            *o += a * shrink;
                        }
                    }
                }
            }
        }
        let mut worst: f64 = 0.0;
        for m in 0..grid.n_x {
            let nrm = out.norm_at(m);
            if !nrm.is_finite() {
                return Err(Error::Ellipticity {
                    t,
                    x: grid.x(m),
                    detail: "tilt evaluation produced a non-finite value".into(),
                });
            }
            worst = worst.max(nrm);
        }
        if worst > self.bound * (1.0 + 1e-9) + 1e-300 {
            return Err(Error::Validation(format!(
                "|f| = {worst} exceeds declared bound M = {} at step {n}",
                self.bound
            )));
        }
        Ok(())
    }
}

/// Evaluate the tilt's controls along an existing path (e.g. an untilted
/// one, for `dQ/dP` under the reference measure).
pub fn controls_along(path: &PathRecord, tilt: &TiltSpec, sigma: &SigmaSpec) -> Result<ControlPath> {
    let g = path.grid;
    let d = path.snapshots[0].dim();
    let prop = HeatPropagator::new(g.circle(), g.dt());
    let mut state = tilt.start(prop, sigma.clone(), d)?;
    let mut out = ControlPath::new(g, d);
    let mut f = Field::zeros(g.circle(), d);
    for n in 0..g.n_t {
        state.fill(n, g.t(n), &path.snapshots[n], &mut f)?;
        out.row_mut(n).copy_from_slice(f.values());
    }
    Ok(out)
}

/// Empirical `E[W²]` against `1 ≤ E[W²] ≤ exp(M²tJ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondMomentReport {
    pub mean_square: f64,
    pub stderr: f64,
    pub upper: f64,
    pub n: usize,
    /// `mean_square + 3·stderr ≥ 1`.
    pub lower_ok: bool,
    /// `mean_square − 3·stderr ≤ exp(M²tJ)`.
    pub upper_ok: bool,
}

pub fn check_second_moment(bound: f64, t: f64, length: f64, weights: &[f64]) -> Result<SecondMomentReport> {
    if weights.is_empty() {
        return Err(Error::Argument("second-moment check needs at least one weight".into()));
    }
    let sq: Vec<f64> = weights.iter().map(|w| w * w).collect();
    let mean_square = crate::stats::mean(&sq);
    let stderr = crate::stats::stderr(&sq);
    let upper = (bound * bound * t * length).exp();
    Ok(SecondMomentReport {
        mean_square,
        stderr,
        upper,
        n: weights.len(),
        lower_ok: mean_square + 3.0 * stderr >= 1.0 - 1e-12,
        upper_ok: mean_square - 3.0 * stderr <= upper * (1.0 + 1e-12),
    })
}

/// Moments of `dP/dQ` over paths simulated under the tilt, and the pathwise
/// energy against `M²tJ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightCheck {
    pub bound: f64,
    pub mean_weight: f64,
    pub stderr: f64,
    pub second_moment: SecondMomentReport,
    pub z2_max: f64,
    /// `M²tJ`.
    pub z2_bound: f64,
    /// `|mean − 1| ≤ 3·stderr`.
    pub mean_ok: bool,
    pub n_paths: usize,
}

pub fn weight_check(model: &Model, tilt: &TiltSpec, n_paths: usize, master_seed: u64) -> Result<WeightCheck> {
    if n_paths < 2 {
        return Err(Error::Argument("weight check needs at least two paths".into()));
    }
    let weights: Vec<GirsanovWeight> = (0..n_paths as u64)
        .into_par_iter()
        .map_init(
            || Stepper::new(model.grid),
            |stepper, i| {
                let noise = sample_noise(model.grid, model.dim(), master_seed, i)?;
                let path = model.run(stepper, &noise, Some(tilt))?;
                path.weight
                    .ok_or_else(|| Error::Argument("tilt produced no weight".into()))
            },
        )
        .collect::<Result<_>>()?;
    let bound = tilt.bound(model.sigma.c1);
    let g = model.grid;
    let w: Vec<f64> = weights.iter().map(|w| w.reverse_weight()).collect();
    let mean_weight = crate::stats::mean(&w);
    let stderr = crate::stats::stderr(&w);
    let z2_max = weights.iter().map(|w| w.z2).fold(0.0, f64::max);
    Ok(WeightCheck {
        bound,
        mean_weight,
        stderr,
        second_moment: check_second_moment(bound, g.horizon, g.length, &w)?,
        z2_max,
        z2_bound: bound * bound * g.horizon * g.length,
        mean_ok: (mean_weight - 1.0).abs() <= 3.0 * stderr,
        n_paths,
    })
}

pub type EventFn<'a> = dyn Fn(&PathRecord) -> Result<bool> + Sync + 'a;

/// Per-path outcome of an importance-sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    /// One flag per event, in the order given.
    pub hits: Vec<bool>,
    /// `dP/dQ` (1 for untilted runs).
    pub weight: f64,
    pub log_weight: f64,
}

/// Simulate `n_paths` paths of `model` under the tilt and record, per path,
/// which events hold and the reverse density. Path `i` uses noise index `i`
/// of `master_seed`.
pub fn simulate_outcomes(
    model: &Model,
    events: &[&EventFn<'_>],
    tilt: Option<&TiltSpec>,
    n_paths: usize,
    master_seed: u64,
) -> Result<Vec<PathOutcome>> {
    let tilt = tilt.filter(|t| !t.is_zero());
    (0..n_paths as u64)
        .into_par_iter()
        .map_init(
            || Stepper::new(model.grid),
            |stepper, i| {
                let noise = sample_noise(model.grid, model.dim(), master_seed, i)?;
                let path = model.run(stepper, &noise, tilt)?;
                let hits = events.iter().map(|e| e(&path)).collect::<Result<Vec<bool>>>()?;
                let lw = path.weight.map_or(0.0, |w| w.log_reverse());
                Ok(PathOutcome {
                    hits,
                    weight: lw.exp(),
                    log_weight: lw,
                })
            },
        )
        .collect()
}

/// Mean of `1_A · dP/dQ` for event `index`, its standard error and the
/// effective number of contributing paths.
pub fn summarize(
    outcomes: &[PathOutcome],
    index: usize,
    tilted: bool,
    eps: f64,
    grid: &Grid,
) -> Result<SmallBallEstimate> {
    if outcomes.is_empty() {
        return Err(Error::Argument("need at least one path".into()));
    }
    if outcomes.iter().any(|o| index >= o.hits.len()) {
        return Err(Error::Argument(format!("no event with index {index}")));
    }
    let vals: Vec<f64> = outcomes.iter().map(|o| if o.hits[index] { o.weight } else { 0.0 }).collect();
    let raw = crate::stats::mean(&vals);
    let stderr = crate::stats::stderr(&vals);
    let n = outcomes.len();
    let n_effective = if tilted {
        let s: f64 = vals.iter().sum();
        let s2: f64 = vals.iter().map(|v| v * v).sum();
        if s2 > 0.0 {
            s * s / s2
        } else {
            0.0
        }
    } else {
        n as f64
    };
    let warning = (tilted && n_effective < 10.0)
        .then(|| format!("degenerate weights: effective sample size {n_effective:.2} < 10"));
    Ok(SmallBallEstimate {
        p_hat: raw.clamp(0.0, 1.0),
        raw_mean: raw,
        stderr,
        n_paths: n,
        n_effective: n_effective.min(n as f64),
        hits: outcomes.iter().filter(|o| o.hits[index]).count(),
        eps,
        horizon: grid.horizon,
        length: grid.length,
        method: if tilted { Method::Tilted } else { Method::Plain },
        warning,
        weights: outcomes.iter().map(|o| o.weight).collect(),
    })
}

/// Importance-sampling estimate of `P(event)` under `model`.
pub fn importance_estimate(
    model: &Model,
    event: &EventFn<'_>,
    tilt: Option<&TiltSpec>,
    eps: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<SmallBallEstimate> {
    let tilted = tilt.is_some_and(|t| !t.is_zero());
    let outcomes = simulate_outcomes(model, &[event], tilt, n_paths, master_seed)?;
    summarize(&outcomes, 0, tilted, eps, &model.grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::solve;
    use approx::assert_abs_diff_eq;

    fn grid() -> Grid {
        Grid::new(1.0, 0.01, 16, 8).unwrap()
    }

    #[test]
    fn zero_control_gives_unit_weight() {
        let g = grid();
        let noise = sample_noise(g, 1, 3, 0).unwrap();
        let w = accumulate_weight(&ControlPath::new(g, 1), &noise, 0.0).unwrap();
        assert_eq!(w.log_weight(), 0.0);
        assert_eq!(w.weight(), 1.0);
    }

    #[test]
    fn constant_control_energy_is_exact() {
        let g = grid();
        let noise = sample_noise(g, 1, 3, 0).unwrap();
        let w = accumulate_weight(&ControlPath::constant(g, &[2.5]), &noise, 2.5).unwrap();
        assert_abs_diff_eq!(w.z2, 2.5 * 2.5 * 0.01 * 1.0, epsilon = 1e-15);
        assert!(w.z2 <= w.energy_bound(0.01, 1.0) * (1.0 + 1e-12));
    }

    #[test]
    fn bound_violation_is_rejected() {
        let g = grid();
        let noise = sample_noise(g, 1, 3, 0).unwrap();
        let r = accumulate_weight(&ControlPath::constant(g, &[2.5]), &noise, 2.0);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn second_moment_of_zero_control() {
        let r = check_second_moment(0.0, 1.0, 1.0, &[1.0; 20]).unwrap();
        assert_eq!(r.mean_square, 1.0);
        assert!(r.lower_ok && r.upper_ok);
        assert!(check_second_moment(1.0, 1.0, 1.0, &[]).is_err());
    }

    #[test]
    fn lower_bound_drift_for_constant_start() {
        let g = grid();
        let u0 = Field::constant(g.circle(), &[0.3]);
        let s = SigmaSpec::identity(1).unwrap();
        let f = lower_bound_drift(&u0, 0.01, &s, &g).unwrap();
        let mut out = [0.0];
        f.eval(0.0025, 0.5, &[0.1], &mut out);
        assert_abs_diff_eq!(out[0], -0.3 / 0.01, epsilon = 1e-9);
        let zero = lower_bound_drift(&Field::zeros(g.circle(), 1), 0.01, &s, &g).unwrap();
        zero.eval(0.0025, 0.5, &[0.1], &mut out);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn lower_bound_tilt_cancels_the_mean_exactly() {
        // With zero noise the tilted path is the deterministic part.
        let g = grid();
        let u0 = Field::from_fn(g.circle(), 1, |x, o| o[0] = 0.2 + 0.1 * (2.0 * std::f64::consts::PI * x).cos());
        let s = SigmaSpec::identity(1).unwrap();
        let f = lower_bound_drift(&u0, 0.01, &s, &g).unwrap();
        let noise = NoisePath::from_increments(g, 1, 0, vec![0.0; 16 * 8]).unwrap();
        let p = solve(&u0, &noise, &s, &DriftSpec::zero(1), Some(&TiltSpec::Drift(f))).unwrap();
        assert!(p.last().sup_norm() < 1e-12);
        for snap in &p.snapshots {
            assert!(snap.sup_norm() <= u0.sup_norm() + 1e-12);
        }
    }

    #[test]
    fn retilt_matches_lower_bound_on_first_interval() {
        let g = grid();
        let u0 = Field::from_fn(g.circle(), 1, |x, o| o[0] = 0.05 * (2.0 * std::f64::consts::PI * x).sin());
        let s = SigmaSpec::identity(1).unwrap();
        let noise = NoisePath::from_increments(g, 1, 0, vec![0.0; 16 * 8]).unwrap();
        let tilt = TiltSpec::Retilt { t1: 0.01, radius: 1.0 };
        let p = solve(&u0, &noise, &s, &DriftSpec::zero(1), Some(&tilt)).unwrap();
        assert!(p.last().sup_norm() < 1e-12);
        assert!(TiltSpec::Retilt { t1: 0.0033, radius: 1.0 }
            .start(HeatPropagator::new(g.circle(), g.dt()), s, 1)
            .is_err());
    }
}
