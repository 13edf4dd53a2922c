//! Mild-form integrator for
//!
//! ```text
//! ∂ₜu = ½∂ₓ²u + g(t,x,u) + σ(t,x,u)·Ẇ,   x on the circle [0, J)
//! ```
//!
//! One step from `t_n` to `t_{n+1}`:
//!
//! ```text
//! u_{n+1} = S_dt[u_n + σ(t_n, ·, u_n)·ΔW_n / dx] + Φ_dt g(t_n, ·, u_n)
//! ```
//!
//! with `S_dt` the exact semigroup on the grid modes and `Φ_dt` its
//! constant-forcing weight (see [`crate::spectral`]). A Girsanov control `f`
//! enters as a shift of the noise, `ΔW = ξ + f·dt·dx`, where `ξ` is the
//! sampled increment.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::girsanov::{ControlPath, GirsanovWeight, TiltSpec};
use crate::spectral::{HeatPropagator, Workspace};
use crate::white_noise::{Grid, NoisePath};

pub type MatrixFn = dyn Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync;
pub type VectorFn = dyn Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync;

/// Matrix coefficient `σ(t, x, u)` with ellipticity window `[c1, c2]` and
/// Lipschitz constant in `u`.
#[derive(Clone)]
pub struct SigmaSpec {
    dim: usize,
    pub c1: f64,
    pub c2: f64,
    pub lipschitz: f64,
    state_free: bool,
    label: String,
    func: Arc<MatrixFn>,
}

impl std::fmt::Debug for SigmaSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SigmaSpec")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("c1", &self.c1)
            .field("c2", &self.c2)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl SigmaSpec {
    /// General coefficient. `func` writes the row-major `d × d` matrix.
    pub fn custom(
        dim: usize,
        c1: f64,
        c2: f64,
        lipschitz: f64,
        state_free: bool,
        label: impl Into<String>,
        func: impl Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("sigma dimension must be at least 1".into()));
        }
        if !(c1 > 0.0 && c1 <= c2 && c2.is_finite()) {
            return Err(Error::Validation(format!(
                "ellipticity window must satisfy 0 < C1 <= C2, got [{c1}, {c2}]"
            )));
        }
        if !(lipschitz >= 0.0) {
            return Err(Error::Validation(format!("Lipschitz constant must be >= 0, got {lipschitz}")));
        }
        Ok(Self {
            dim,
            c1,
            c2,
            lipschitz,
            state_free,
            label: label.into(),
            func: Arc::new(func),
        })
    }

    /// `c · I_d`.
    pub fn scalar(c: f64, dim: usize) -> Result<Self> {
        Self::custom(dim, c, c, 0.0, true, format!("scalar({c})"), move |_, _, _, out| {
            out.fill(0.0);
            for i in 0..dim {
                out[i * dim + i] = c;
            }
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::scalar(1.0, dim).map(|s| s.with_label("identity"))
    }

    pub fn diagonal(entries: Vec<f64>) -> Result<Self> {
        let dim = entries.len();
        let lo = entries.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = entries.iter().cloned().fold(0.0, f64::max);
        let label = format!("diagonal({entries:?})");
        Self::custom(dim, lo, hi, 0.0, true, label, move |_, _, _, out| {
            out.fill(0.0);
            for (i, e) in entries.iter().enumerate() {
                out[i * dim + i] = *e;
            }
        })
    }

    /// `σ(u) = m·I + a·diag(sin(D·uᵢ / a))` with `m = (C1 + C2)/2`,
    /// `a = (C2 − C1)/2`: eigenvalues stay in `[C1, C2]` and the map is
    /// `D`-Lipschitz in `u`.
    pub fn state_dependent(dim: usize, c1: f64, c2: f64, lipschitz: f64) -> Result<Self> {
        let mid = 0.5 * (c1 + c2);
        let amp = 0.5 * (c2 - c1);
        if amp == 0.0 && lipschitz > 0.0 {
            return Err(Error::Validation(
                "a state-dependent coefficient needs C2 > C1 when D > 0".into(),
            ));
        }
        let label = format!("state_dependent(C1={c1}, C2={c2}, D={lipschitz})");
        Self::custom(dim, c1, c2, lipschitz, lipschitz == 0.0, label, move |_, _, u, out| {
            out.fill(0.0);
            for i in 0..dim {
                let wobble = if amp > 0.0 { amp * (lipschitz * u[i] / amp).sin() } else { 0.0 };
                out[i * dim + i] = mid + wobble;
            }
        })
    }

    /// `σ^{(J)}(t, x, u) = σ(J²t, Jx, J^{1/2}u)`: the coefficient of the
    /// unit-circle problem obtained by Brownian rescaling. Same ellipticity
    /// window, Lipschitz constant multiplied by `J^{1/2}`.
    pub fn rescaled(&self, factor: f64) -> Self {
        let inner = Arc::clone(&self.func);
        let dim = self.dim;
        let root = factor.sqrt();
        Self {
            dim,
            c1: self.c1,
            c2: self.c2,
            lipschitz: self.lipschitz * root,
            state_free: self.state_free,
            label: format!("{} rescaled by {factor}", self.label),
            func: Arc::new(move |t, x, u, out| {
                let v: Vec<f64> = u.iter().map(|ui| root * ui).collect();
                inner(factor * factor * t, factor * x, &v, out)
            }),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// True when `σ` does not depend on `u`.
    pub fn is_state_free(&self) -> bool {
        self.state_free
    }

    #[inline]
    pub fn eval(&self, t: f64, x: f64, u: &[f64], out: &mut [f64]) {
        (self.func)(t, x, u, out)
    }

    /// Solve `σ(t,x,u)·y = v` by Cholesky factorisation.
    pub fn solve(&self, t: f64, x: f64, u: &[f64], v: &[f64], y: &mut [f64]) -> Result<()> {
        let d = self.dim;
        if d == 1 {
            let mut s = [0.0];
            self.eval(t, x, u, &mut s);
            if !(s[0] > 0.0) {
                return Err(Error::Ellipticity {
                    t,
                    x,
                    detail: format!("sigma = {} is not positive", s[0]),
                });
            }
            y[0] = v[0] / s[0];
            return Ok(());
        }
        let mut a = vec![0.0; d * d];
        self.eval(t, x, u, &mut a);
        cholesky_solve(&mut a, v, y, d).map_err(|detail| Error::Ellipticity { t, x, detail })
    }

    /// Spot-check symmetry, the ellipticity window and the Lipschitz bound on
    /// `samples` random `(t, x, u)` with `|u|` up to `u_scale`.
    pub fn spot_check(&self, samples: usize, horizon: f64, length: f64, u_scale: f64, seed: u64) -> Result<()> {
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d * d];
        let tol = 1e-10 * self.c2.max(1.0);
        for _ in 0..samples {
            let t = rng.random::<f64>() * horizon;
            let x = rng.random::<f64>() * length;
            let u: Vec<f64> = (0..d).map(|_| u_scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
            let v: Vec<f64> = (0..d).map(|_| u_scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
            self.eval(t, x, &u, &mut a);
            for i in 0..d {
                for j in 0..i {
                    if (a[i * d + j] - a[j * d + i]).abs() > tol {
                        return Err(Error::Validation(format!("sigma not symmetric at (t={t}, x={x})")));
                    }
                }
            }
            let mut y: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            y.iter_mut().for_each(|v| *v /= norm);
            let q: f64 = (0..d).map(|i| y[i] * (0..d).map(|j| a[i * d + j] * y[j]).sum::<f64>()).sum();
            if q < self.c1 - tol || q > self.c2 + tol {
                return Err(Error::Validation(format!(
                    "<y, sigma y> = {q} outside [{}, {}] at (t={t}, x={x})",
                    self.c1, self.c2
                )));
            }
            self.eval(t, x, &v, &mut b);
            let diff = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let dist = u.iter().zip(&v).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            if diff > self.lipschitz * dist + tol {
                return Err(Error::Validation(format!(
                    "|sigma(u) - sigma(v)| = {diff} exceeds D|u - v| = {}",
                    self.lipschitz * dist
                )));
            }
        }
        Ok(())
    }
}

fn cholesky_solve(a: &mut [f64], v: &[f64], y: &mut [f64], d: usize) -> std::result::Result<(), String> {
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > 0.0) {
            return Err(format!("matrix is not positive definite (pivot {j} = {s})"));
        }
        let l = s.sqrt();
        a[j * d + j] = l;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / l;
        }
    }
    for i in 0..d {
        let mut s = v[i];
        for k in 0..i {
            s -= a[i * d + k] * y[k];
        }
        y[i] = s / a[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= a[k * d + i] * y[k];
        }
        y[i] = s / a[i * d + i];
    }
    Ok(())
}

/// Bounded drift `g(t, x, u)`.
#[derive(Clone)]
pub struct DriftSpec {
    dim: usize,
    pub bound: f64,
    zero: bool,
    func: Arc<VectorFn>,
}

impl std::fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriftSpec")
            .field("dim", &self.dim)
            .field("bound", &self.bound)
            .field("zero", &self.zero)
            .finish()
    }
}

impl DriftSpec {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            bound: 0.0,
            zero: true,
            func: Arc::new(|_, _, _, out| out.fill(0.0)),
        }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let bound = value.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            dim: value.len(),
            bound,
            zero: bound == 0.0,
            func: Arc::new(move |_, _, _, out| out.copy_from_slice(&value)),
        }
    }

    pub fn custom(
        dim: usize,
        bound: f64,
        func: impl Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            bound,
            zero: false,
            func: Arc::new(func),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    #[inline]
    pub fn eval(&self, t: f64, x: f64, u: &[f64], out: &mut [f64]) {
        (self.func)(t, x, u, out)
    }

    /// `-g`.
    pub fn negated(&self) -> Self {
        let inner = Arc::clone(&self.func);
        Self {
            dim: self.dim,
            bound: self.bound,
            zero: self.zero,
            func: Arc::new(move |t, x, u, out| {
                inner(t, x, u, out);
                out.iter_mut().for_each(|v| *v = -*v);
            }),
        }
    }

    /// Check `|g| <= bound` at `samples` random points with `|u|` up to `u_scale`.
    pub fn spot_check(&self, samples: usize, horizon: f64, length: f64, u_scale: f64, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![0.0; self.dim];
        for _ in 0..samples {
            let t = rng.random::<f64>() * horizon;
            let x = rng.random::<f64>() * length;
            let u: Vec<f64> = (0..self.dim).map(|_| u_scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
            self.eval(t, x, &u, &mut out);
            let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > self.bound * (1.0 + 1e-12) {
                return Err(Error::Validation(format!(
                    "|g| = {n} exceeds declared bound {} at (t={t}, x={x})",
                    self.bound
                )));
            }
        }
        Ok(())
    }
}

/// Radial projection onto the closed ball of radius `eps`.
pub fn clamp_f_eps(z: &[f64], eps: f64, out: &mut [f64]) {
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = if n > eps { eps / n } else { 1.0 };
    for (o, v) in out.iter_mut().zip(z) {
        *o = s * v;
    }
}

/// Trajectory on the time grid with sup-norm tracking.
#[derive(Debug, Clone)]
pub struct PathRecord {
    pub grid: Grid,
    /// `u(t_n, ·)` for `n = 0..=n_t`.
    pub snapshots: Vec<Field>,
    /// `max_m |u(t_n, x_m)|` per snapshot.
    pub sup_per_snapshot: Vec<f64>,
    /// Maximum of `sup_per_snapshot`.
    pub sup_norm: f64,
    /// Girsanov sums of the control against the sampled noise, when a tilt was applied.
    pub weight: Option<GirsanovWeight>,
    /// Control values used at each step, when a tilt was applied.
    pub controls: Option<ControlPath>,
}

impl PathRecord {
    fn new(grid: Grid, u0: Field) -> Self {
        let s = u0.sup_norm();
        let mut snapshots = Vec::with_capacity(grid.n_t + 1);
        snapshots.push(u0);
        Self {
            grid,
            snapshots,
            sup_per_snapshot: vec![s],
            sup_norm: s,
            weight: None,
            controls: None,
        }
    }

    fn push(&mut self, f: Field) {
        let s = f.sup_norm();
        self.sup_norm = self.sup_norm.max(s);
        self.sup_per_snapshot.push(s);
        self.snapshots.push(f);
    }

    pub fn last(&self) -> &Field {
        self.snapshots.last().expect("path has at least the initial profile")
    }

    /// Largest `|u − other|` over all recorded grid points.
    pub fn max_abs_diff(&self, other: &PathRecord) -> Result<f64> {
        if self.snapshots.len() != other.snapshots.len() {
            return Err(Error::Dimension("paths have different lengths".into()));
        }
        self.snapshots
            .iter()
            .zip(&other.snapshots)
            .try_fold(0.0f64, |acc, (a, b)| Ok(acc.max(a.max_abs_diff(b)?)))
    }
}

/// Reusable per-worker integrator state for one grid.
pub struct Stepper {
    prop: HeatPropagator,
    ws: Workspace,
    grid: Grid,
}

impl Stepper {
    pub fn new(grid: Grid) -> Self {
        let prop = HeatPropagator::new(grid.circle(), grid.dt());
        let ws = prop.workspace();
        Self { prop, ws, grid }
    }

    pub fn from_propagator(grid: Grid, prop: HeatPropagator) -> Self {
        let ws = prop.workspace();
        Self { prop, ws, grid }
    }

    pub fn propagator(&self) -> &HeatPropagator {
        &self.prop
    }

    /// One mild-form step. `control` (if any) shifts the noise by `f·dt·dx`.
    #[allow(clippy::too_many_arguments)]
    fn step_into(
        &mut self,
        profile: &Field,
        t: f64,
        noise_row: &[f64],
        sigma: &SigmaSpec,
        drift: &DriftSpec,
        control: Option<&Field>,
        out: &mut Field,
        injected: &mut Field,
        forcing: &mut Field,
    ) -> Result<()> {
        let g = self.grid;
        let d = profile.dim();
        let (dx, cell) = (g.dx(), g.dt() * g.dx());
        let mut s = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        for m in 0..g.n_x {
            let x = g.circle().x(m);
            let u = profile.point(m);
            sigma.eval(t, x, u, &mut s);
            for c in 0..d {
                e[c] = noise_row[m * d + c] + control.map_or(0.0, |f| f.get(m, c) * cell);
            }
            let target = injected.point_mut(m);
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += s[i * d + j] * e[j];
                }
                target[i] = u[i] + acc / dx;
            }
            if !drift.is_zero() {
                drift.eval(t, x, u, forcing.point_mut(m));
            }
        }
        let b = if drift.is_zero() { None } else { Some(&*forcing) };
        self.prop.advance(injected, b, out, &mut self.ws)
    }
}

fn check_shapes(u0: &Field, noise: &NoisePath, sigma: &SigmaSpec, drift: &DriftSpec) -> Result<()> {
    let g = noise.grid();
    if u0.grid() != &g.circle() {
        return Err(Error::Dimension(format!(
            "initial profile has {} points on length {}, noise grid has {} on {}",
            u0.grid().n_x,
            u0.grid().length,
            g.n_x,
            g.length
        )));
    }
    let d = u0.dim();
    if noise.dim() != d || sigma.dim() != d || drift.dim() != d {
        return Err(Error::Dimension(format!(
            "dimensions differ: profile {d}, noise {}, sigma {}, drift {}",
            noise.dim(),
            sigma.dim(),
            drift.dim()
        )));
    }
    Ok(())
}

/// One explicit mild-form step from `t` using noise row `noise_row`.
pub fn step(
    stepper: &mut Stepper,
    profile: &Field,
    t: f64,
    noise_row: &[f64],
    sigma: &SigmaSpec,
    drift: &DriftSpec,
) -> Result<Field> {
    let grid = *profile.grid();
    let d = profile.dim();
    if noise_row.len() != grid.n_x * d {
        return Err(Error::Dimension("noise row does not match profile".into()));
    }
    let mut out = Field::zeros(grid, d);
    let mut injected = Field::zeros(grid, d);
    let mut forcing = Field::zeros(grid, d);
    stepper.step_into(profile, t, noise_row, sigma, drift, None, &mut out, &mut injected, &mut forcing)?;
    if !out.is_finite() {
        return Err(Error::BlowUp { step: 1 });
    }
    Ok(out)
}

/// Integrate over the full noise grid. With a tilt, the control is evaluated
/// from the current state before each step and the Girsanov sums are
/// accumulated against the sampled increments.
pub fn solve(
    u0: &Field,
    noise: &NoisePath,
    sigma: &SigmaSpec,
    drift: &DriftSpec,
    tilt: Option<&TiltSpec>,
) -> Result<PathRecord> {
    let mut stepper = Stepper::new(*noise.grid());
    solve_with(&mut stepper, u0, noise, sigma, drift, tilt)
}

/// [`solve`] reusing a worker's [`Stepper`].
pub fn solve_with(
    stepper: &mut Stepper,
    u0: &Field,
    noise: &NoisePath,
    sigma: &SigmaSpec,
    drift: &DriftSpec,
    tilt: Option<&TiltSpec>,
) -> Result<PathRecord> {
    check_shapes(u0, noise, sigma, drift)?;
    let g = *noise.grid();
    let d = u0.dim();
    let circle = g.circle();
    let mut record = PathRecord::new(g, u0.clone());
    let mut injected = Field::zeros(circle, d);
    let mut forcing = Field::zeros(circle, d);
    let mut control = Field::zeros(circle, d);
    let mut tilt_state = match tilt {
        Some(t) if !t.is_zero() => Some(t.start(stepper.propagator().clone(), sigma.clone(), d)?),
        _ => None,
    };
    let mut controls = tilt_state.as_ref().map(|_| ControlPath::new(g, d));
    let cell = g.cell_variance();
    let (mut z1, mut z2) = (0.0, 0.0);

    for n in 0..g.n_t {
        let t = g.t(n);
        let current = record.last().clone();
        let ctrl = match tilt_state.as_mut() {
            Some(state) => {
                state.fill(n, t, &current, &mut control)?;
                let row = noise.row(n);
                for (f, xi) in control.values().iter().zip(row) {
                    z1 += f * xi;
                    z2 += f * f * cell;
                }
                if let Some(c) = controls.as_mut() {
                    c.row_mut(n).copy_from_slice(control.values());
                }
                Some(&control)
            }
            None => None,
        };
        let mut next = Field::zeros(circle, d);
        stepper.step_into(&current, t, noise.row(n), sigma, drift, ctrl, &mut next, &mut injected, &mut forcing)?;
        if !next.is_finite() {
            return Err(Error::BlowUp { step: n + 1 });
        }
        record.push(next);
    }
    if let Some(state) = tilt_state {
        record.weight = Some(GirsanovWeight::new(z1, z2, state.bound()));
        record.controls = controls;
    }
    Ok(record)
}

/// Everything that fixes the law of a simulated path except the noise.
#[derive(Debug, Clone)]
pub struct Model {
    pub grid: Grid,
    pub u0: Field,
    pub sigma: SigmaSpec,
    pub drift: DriftSpec,
}

impl Model {
    pub fn new(grid: Grid, u0: Field, sigma: SigmaSpec, drift: DriftSpec) -> Result<Self> {
        if u0.grid() != &grid.circle() {
            return Err(Error::Dimension("initial profile is not on the simulation grid".into()));
        }
        let d = u0.dim();
        if sigma.dim() != d || drift.dim() != d {
            return Err(Error::Dimension(format!(
                "dimensions differ: profile {d}, sigma {}, drift {}",
                sigma.dim(),
                drift.dim()
            )));
        }
        Ok(Self { grid, u0, sigma, drift })
    }

    /// Zero start, zero drift.
    pub fn centred(grid: Grid, sigma: SigmaSpec) -> Result<Self> {
        let d = sigma.dim();
        Self::new(grid, Field::zeros(grid.circle(), d), sigma, DriftSpec::zero(d))
    }

    pub fn dim(&self) -> usize {
        self.u0.dim()
    }

    pub fn run(&self, stepper: &mut Stepper, noise: &NoisePath, tilt: Option<&TiltSpec>) -> Result<PathRecord> {
        solve_with(stepper, &self.u0, noise, &self.sigma, &self.drift, tilt)
    }
}

/// The unfrozen clamped field `v`, the frozen-coefficient Gaussian field
/// `v_g`, and their difference `D = v − v_g`, all driven by one noise path.
#[derive(Debug, Clone)]
pub struct FrozenComparison {
    pub v: PathRecord,
    pub v_g: PathRecord,
    pub diff: PathRecord,
}

/// Couple `v` (coefficient `σ(t, x, f_ε(v))`) with `v_g` (coefficient frozen
/// at `σ(t, x, f_ε(u₀(x)))`). `D` solves the linear equation driven by the
/// coefficient difference, so `v = v_g + D` holds up to rounding.
pub fn solve_frozen_comparison(u0: &Field, noise: &NoisePath, sigma: &SigmaSpec, eps: f64) -> Result<FrozenComparison> {
    if !(eps > 0.0) {
        return Err(Error::domain("eps", eps, "clamp radius must be positive"));
    }
    let zero = DriftSpec::zero(u0.dim());
    check_shapes(u0, noise, sigma, &zero)?;
    let g = *noise.grid();
    let d = u0.dim();
    let circle = g.circle();
    let (dx, dd) = (g.dx(), d * d);
    let mut stepper = Stepper::new(g);

    let mut clamped = vec![0.0; d];
    let mut v = PathRecord::new(g, u0.clone());
    let mut vg = PathRecord::new(g, u0.clone());
    let mut diff = PathRecord::new(g, Field::zeros(circle, d));
    let mut inj_v = Field::zeros(circle, d);
    let mut inj_g = Field::zeros(circle, d);
    let mut inj_d = Field::zeros(circle, d);
    let mut sv = vec![0.0; dd];
    let mut sg = vec![0.0; dd];
    for n in 0..g.n_t {
        let t = g.t(n);
        let row = noise.row(n);
        let (cv, cg, cd) = (v.last(), vg.last(), diff.last());
        for m in 0..g.n_x {
            let x = circle.x(m);
            clamp_f_eps(cv.point(m), eps, &mut clamped);
            sigma.eval(t, x, &clamped, &mut sv);
            clamp_f_eps(u0.point(m), eps, &mut clamped);
            sigma.eval(t, x, &clamped, &mut sg);
            let xi = &row[m * d..(m + 1) * d];
            for i in 0..d {
                let (mut a, mut b) = (0.0, 0.0);
                for j in 0..d {
                    a += sv[i * d + j] * xi[j];
                    b += sg[i * d + j] * xi[j];
                }
                inj_v.set(m, i, cv.get(m, i) + a / dx);
                inj_g.set(m, i, cg.get(m, i) + b / dx);
                inj_d.set(m, i, cd.get(m, i) + (a - b) / dx);
            }
        }
        let mut next_v = Field::zeros(circle, d);
        let mut next_g = Field::zeros(circle, d);
        let mut next_d = Field::zeros(circle, d);
        stepper.prop.advance(&inj_v, None, &mut next_v, &mut stepper.ws)?;
        stepper.prop.advance(&inj_g, None, &mut next_g, &mut stepper.ws)?;
        stepper.prop.advance(&inj_d, None, &mut next_d, &mut stepper.ws)?;
        if !next_v.is_finite() || !next_g.is_finite() {
            return Err(Error::BlowUp { step: n + 1 });
        }
        v.push(next_v);
        vg.push(next_g);
        diff.push(next_d);
    }
    Ok(FrozenComparison { v, v_g: vg, diff })
}

/// Deterministic target `h(t, x)` sampled on the simulation grid, with its
/// declared uniform bound `H` on `h`, `∂ₜh`, `∂ₓh` and `∂ₓ²h`.
#[derive(Debug, Clone)]
pub struct TargetPath {
    pub grid: Grid,
    pub snapshots: Vec<Field>,
    pub bound: f64,
}

impl TargetPath {
    /// Sample `h` at every grid time and point.
    pub fn from_fn(grid: Grid, dim: usize, bound: f64, h: impl Fn(f64, f64, &mut [f64])) -> Self {
        let circle = grid.circle();
        let snapshots = (0..=grid.n_t)
            .map(|n| {
                let t = grid.t(n);
                Field::from_fn(circle, dim, |x, out| h(t, x, out))
            })
            .collect();
        Self { grid, snapshots, bound }
    }

    pub fn zero(grid: Grid, dim: usize) -> Self {
        Self::from_fn(grid, dim, 0.0, |_, _, out| out.fill(0.0))
    }

    /// Check the declared bound on `h`, its spectral first and second space
    /// derivatives, and its forward-difference time derivative.
    pub fn validate(&self) -> Result<()> {
        let circle = self.grid.circle();
        let prop = HeatPropagator::new(circle, self.grid.dt());
        let tol = self.bound * (1.0 + 1e-9) + 1e-12;
        let dt = self.grid.dt();
        for (n, h) in self.snapshots.iter().enumerate() {
            if h.grid() != &circle {
                return Err(Error::Dimension(format!("target snapshot {n} is on a different grid")));
            }
            let lap = prop.half_laplacian(h)?;
            let deriv = first_derivative(h)?;
            let checks = [("h", h.sup_norm()), ("d2h/dx2", 2.0 * lap.sup_norm()), ("dh/dx", deriv.sup_norm())];
            for (name, v) in checks {
                if v > tol {
                    return Err(Error::Validation(format!(
                        "|{name}| = {v} exceeds bound H = {} at step {n}",
                        self.bound
                    )));
                }
            }
            if let Some(next) = self.snapshots.get(n + 1) {
                let mut dh = next.clone();
                dh.axpy(-1.0, h)?;
                let rate = dh.sup_norm() / dt;
                if rate > tol {
                    return Err(Error::Validation(format!(
                        "|dh/dt| = {rate} exceeds bound H = {} at step {n}",
                        self.bound
                    )));
                }
            }
        }
        if self.snapshots.len() != self.grid.n_t + 1 {
            return Err(Error::Dimension("target must have n_t + 1 snapshots".into()));
        }
        Ok(())
    }
}

/// Spectral `∂ₓ f`.
fn first_derivative(f: &Field) -> Result<Field> {
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;
    let grid = *f.grid();
    let n = grid.n_x;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut out = Field::zeros(grid, f.dim());
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for c in 0..f.dim() {
        for (m, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(f.get(m, c), 0.0);
        }
        fwd.process(&mut buf);
        for (k, b) in buf.iter_mut().enumerate() {
            // The Nyquist mode has no consistent real derivative.
            let kk = if 2 * k == n { 0.0 } else if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            *b *= Complex::new(0.0, 2.0 * std::f64::consts::PI * kk / grid.length);
        }
        inv.process(&mut buf);
        for (m, b) in buf.iter().enumerate() {
            out.set(m, c, b.re / n as f64);
        }
    }
    Ok(out)
}

/// The centred problem for `w = u − u₀ − h + h₀`:
///
/// ```text
/// ∂ₜw = ½∂ₓ²w − g₁(t, x, w) + σ₁(t, x, w)·Ẇ,   w(0) = 0
/// g₁ = −g(t, x, u) − Hu₀ − Hh(t) + Hh₀,         σ₁(t, x, w) = σ(t, x, u)
/// ```
///
/// with `H = ½∂ₓ² − ∂ₜ`. On the grid, `H h` at step `n` is the operator of
/// the time stepper, `Φ_dt⁻¹(S_dt h_n − h_{n+1})`, which reduces to the
/// spectral `½∂ₓ²` on time-independent profiles. With this choice the
/// reduction is exact for the discrete scheme, not only in the limit.
#[derive(Debug, Clone)]
pub struct ReducedProblem {
    /// `g₁` (the reduced drift enters the dynamics with a minus sign).
    pub g1: DriftSpec,
    pub sigma1: SigmaSpec,
    pub w0: Field,
    /// `u₀ − h₀`, added back to `w` to recover `u − h`.
    pub offset: Field,
}

impl ReducedProblem {
    /// Drift of the `w` equation in the solver's `+drift` convention, `−g₁`.
    pub fn drift(&self) -> DriftSpec {
        self.g1.negated()
    }
}

pub fn support_reduction(u0: &Field, h: &TargetPath, drift: &DriftSpec, sigma: &SigmaSpec) -> Result<ReducedProblem> {
    h.validate()?;
    let grid = h.grid;
    let circle = grid.circle();
    if u0.grid() != &circle {
        return Err(Error::Dimension("initial profile and target are on different grids".into()));
    }
    let d = u0.dim();
    if drift.dim() != d || sigma.dim() != d || h.snapshots[0].dim() != d {
        return Err(Error::Dimension("dimensions of u0, h, g and sigma differ".into()));
    }
    let prop = HeatPropagator::new(circle, grid.dt());
    let h0 = h.snapshots[0].clone();

    // shift_n = u₀ + h_n − h₀, so u = w + shift_n.
    let shifts: Vec<Field> = h
        .snapshots
        .iter()
        .map(|hn| {
            let mut s = u0.clone();
            s.axpy(1.0, hn)?;
            s.axpy(-1.0, &h0)?;
            Ok(s)
        })
        .collect::<Result<_>>()?;

    // Deterministic part −Hu₀ − Hh_n + Hh₀ per step.
    let mut u0_minus_h0 = u0.clone();
    u0_minus_h0.axpy(-1.0, &h0)?;
    let static_part = prop.half_laplacian(&u0_minus_h0)?;
    let mut det: Vec<Field> = Vec::with_capacity(grid.n_t + 1);
    for n in 0..=grid.n_t {
        let heat_h = if n < grid.n_t {
            let mut a = prop.semigroup(&h.snapshots[n], grid.dt())?;
            a.axpy(-1.0, &h.snapshots[n + 1])?;
            prop.phi_inverse(&a)?
        } else {
            Field::zeros(circle, d)
        };
        let mut q = static_part.clone();
        q.axpy(1.0, &heat_h)?;
        q.values_mut().iter_mut().for_each(|v| *v = -*v);
        det.push(q);
    }
    let det_bound = det.iter().map(Field::sup_norm).fold(0.0, f64::max);

    let (dt, dx, n_x) = (grid.dt(), grid.dx(), grid.n_x);
    let locate = move |t: f64, x: f64| -> (usize, usize) {
        let n = ((t / dt).round() as usize).min(grid.n_t);
        let m = ((x / dx).round() as isize).rem_euclid(n_x as isize) as usize;
        (n, m)
    };

    let shifts = Arc::new(shifts);
    let det = Arc::new(det);
    let g = drift.clone();
    let sh = Arc::clone(&shifts);
    let g1 = DriftSpec::custom(d, drift.bound + det_bound, move |t, x, w, out| {
        let (n, m) = locate(t, x);
        let u: Vec<f64> = w.iter().zip(sh[n].point(m)).map(|(a, b)| a + b).collect();
        g.eval(t, x, &u, out);
        for (o, q) in out.iter_mut().zip(det[n].point(m)) {
            *o = -*o + q;
        }
    });

    let s = sigma.clone();
    let sh = Arc::clone(&shifts);
    let sigma1 = SigmaSpec::custom(
        d,
        sigma.c1,
        sigma.c2,
        sigma.lipschitz,
        sigma.is_state_free(),
        format!("{} (centred)", sigma.label()),
        move |t, x, w, out| {
            let (n, m) = locate(t, x);
            let u: Vec<f64> = w.iter().zip(sh[n].point(m)).map(|(a, b)| a + b).collect();
            s.eval(t, x, &u, out)
        },
    )?;

    Ok(ReducedProblem {
        g1,
        sigma1,
        w0: Field::zeros(circle, d),
        offset: u0_minus_h0,
    })
}
