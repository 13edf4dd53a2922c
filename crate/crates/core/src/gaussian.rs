//! Exact Gaussian computations for the additive-noise case.
//!
//! With `σ ≡ c·I` the noise term `N(t, x) = ∫∫ G(t − s, x − y) σ W(dy ds)`
//! is a centred Gaussian field. At the end of one interval `t₁ = c₀ε⁴` its
//! covariance between two grid points at circular distance `Δ` is
//!
//! ```text
//! Cov = c² ∫₀^{t₁} G(2r, Δ) dr,
//! ```
//!
//! evaluated here by quadrature. On top of that sit the conditional
//! regression coefficients of one grid value on the earlier ones, the
//! conditional variances, and the numerical estimates of the constants that
//! fix the spacing of the grid.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::heat_kernel;
use crate::solver::{Model, SigmaSpec, Stepper};
use crate::stats;
use crate::white_noise::{path_seed, sample_noise, Grid};

/// Absolute tolerance of the covariance quadrature.
pub const QUAD_TOL: f64 = 1e-12;
/// Largest condition number accepted for a covariance solve.
pub const MAX_CONDITION: f64 = 1e12;

/// Space-time grid `tₙ = n·c₀ε⁴`, `xₙ = n·c₁ε²` with `c₁ = √(θc₀)`.
///
/// `θ` is rounded up from the requested minimum so that the circle holds a
/// whole number of spatial blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridScheme {
    pub eps: f64,
    pub c0: f64,
    pub theta: f64,
    pub c1: f64,
    pub length: f64,
    /// Number of spatial blocks `J/(c₁ε²)`.
    pub blocks: usize,
}

impl GridScheme {
    pub fn new(eps: f64, c0: f64, theta_min: f64, length: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::domain("eps", eps, "ball radius must be positive"));
        }
        if !(c0 > 0.0) {
            return Err(Error::domain("c0", c0, "time constant must be positive"));
        }
        if !(theta_min > 0.0) {
            return Err(Error::domain("theta", theta_min, "spacing parameter must be positive"));
        }
        if !(length > 0.0) {
            return Err(Error::domain("J", length, "circle length must be positive"));
        }
        let c1_min = (theta_min * c0).sqrt();
        let blocks = (length / (c1_min * eps * eps)).floor() as usize;
        if blocks < 1 {
            return Err(Error::Config(format!(
                "eps = {eps} leaves no whole spatial block on a circle of length {length}"
            )));
        }
        let c1 = length / (blocks as f64 * eps * eps);
        Ok(Self {
            eps,
            c0,
            theta: c1 * c1 / c0,
            c1,
            length,
            blocks,
        })
    }

    /// Interval length `t₁ = c₀ε⁴`.
    pub fn t1(&self) -> f64 {
        self.c0 * self.eps.powi(4)
    }

    /// Block width `c₁ε²`.
    pub fn spacing(&self) -> f64 {
        self.c1 * self.eps * self.eps
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.t1()
    }

    pub fn x(&self, n: usize) -> f64 {
        n as f64 * self.spacing()
    }

    /// `min{n ≥ 1 : tₙ > T}`.
    pub fn n1(&self, horizon: f64) -> usize {
        let r = horizon / self.t1();
        ((r * (1.0 + 1e-12)).floor() as usize + 1).max(1)
    }

    /// `min{n ≥ 1 : xₙ > J}`.
    pub fn n2(&self) -> usize {
        self.blocks + 1
    }

    /// Grid points `x_j`, `j ≤ n₂ − 2`, per time level.
    pub fn points(&self) -> usize {
        self.n2() - 1
    }

    /// Number of whole intervals in `[0, T]`.
    pub fn intervals(&self, horizon: f64) -> Result<usize> {
        let r = horizon / self.t1();
        let n = r.round();
        if n < 1.0 || (r - n).abs() > 1e-9 * r.max(1.0) {
            return Err(Error::Config(format!(
                "horizon {horizon} is not a whole number of intervals of length {}",
                self.t1()
            )));
        }
        Ok(n as usize)
    }

    /// Simulation grid into which the scheme embeds: `points_per_block`
    /// cells per block and `steps_per_interval` steps per interval.
    pub fn simulation_grid(&self, horizon: f64, points_per_block: usize, steps_per_interval: usize) -> Result<Grid> {
        if points_per_block == 0 || steps_per_interval == 0 {
            return Err(Error::Argument("grid refinement factors must be positive".into()));
        }
        let intervals = self.intervals(horizon)?;
        Grid::new(
            self.length,
            intervals as f64 * self.t1(),
            self.blocks * points_per_block,
            intervals * steps_per_interval,
        )
    }

    /// `θ ≥ max{2, 4 log(1/(2c₀))}`, `c₀` below its bound and
    /// `n₂ ≤ J/(c₁ε²) + 1`.
    pub fn check_constraints(&self, c0_bound: f64) -> Result<()> {
        if !(self.c0 < c0_bound) {
            return Err(Error::Validation(format!("c0 = {} is not below its bound {c0_bound}", self.c0)));
        }
        let th = theta_floor(self.c0);
        if self.theta < th * (1.0 - 1e-12) {
            return Err(Error::Validation(format!("theta = {} is below {th}", self.theta)));
        }
        if self.n2() as f64 > self.length / self.spacing() + 1.0 + 1e-9 {
            return Err(Error::Validation("n2 exceeds J/(c1 eps^2) + 1".into()));
        }
        Ok(())
    }
}

/// `max{2, 4 log(1/(2c₀))}`.
pub fn theta_floor(c0: f64) -> f64 {
    (4.0 * (1.0 / (2.0 * c0)).ln()).max(2.0)
}

/// Which term of `max{(K₂/(36 log K₁ · C₂²))², 1}` is larger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum C0Branch {
    TailConstants,
    Unit,
}

/// Upper bound on `c₀` from the tail constants. For `K₁ ≤ 1` the first term
/// is undefined and the unit branch applies.
pub fn c0_bound(k1: f64, k2: f64, c2: f64) -> (f64, C0Branch) {
    let first = if k1 > 1.0 && k2 > 0.0 {
        (k2 / (36.0 * k1.ln() * c2 * c2)).powi(2)
    } else {
        f64::NEG_INFINITY
    };
    if first > 1.0 {
        (first, C0Branch::TailConstants)
    } else {
        (1.0, C0Branch::Unit)
    }
}

/// `c² ∫₀^{t₁} G(2r, Δ) dr`, computed as `∫₀^{√t₁} G(2v², Δ)·2v dv` so the
/// integrand stays bounded at `v = 0`.
pub fn lag_covariance(delta: f64, t1: f64, length: f64, scale: f64) -> f64 {
    if t1 <= 0.0 {
        return 0.0;
    }
    let f = |v: f64| {
        if v <= 0.0 {
            return if delta.rem_euclid(length) == 0.0 { 1.0 / std::f64::consts::PI.sqrt() } else { 0.0 };
        }
        heat_kernel::g(2.0 * v * v, delta, length) * 2.0 * v
    };
    let out = quadrature::integrate(f, 0.0, t1.sqrt(), QUAD_TOL);
    scale * scale * out.integral
}

/// Covariance of the first noise component at `(t₁, x_k)` and `(t₁, x_kp)`.
pub fn noise_covariance(k: usize, kp: usize, scheme: &GridScheme, sigma_scale: f64) -> Result<f64> {
    let n = scheme.points();
    if k >= n || kp >= n {
        return Err(Error::Argument(format!("grid indices ({k}, {kp}) outside 0..{n}")));
    }
    let delta = (k as f64 - kp as f64).abs() * scheme.spacing();
    Ok(lag_covariance(delta, scheme.t1(), scheme.length, sigma_scale))
}

/// Covariance matrix `S = D·T·D` of the grid values at `t₁`.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    pub scheme: GridScheme,
    pub sigma_scale: f64,
    pub s: DMatrix<f64>,
    pub d_diag: Vec<f64>,
    pub t_corr: DMatrix<f64>,
    pub condition: f64,
}

impl CovarianceModel {
    pub fn build(scheme: GridScheme, sigma_scale: f64) -> Result<Self> {
        if !(sigma_scale > 0.0) {
            return Err(Error::domain("sigma", sigma_scale, "noise scale must be positive"));
        }
        let n = scheme.points();
        // Entries depend only on the circular lag.
        let lags: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|l| lag_covariance(l as f64 * scheme.spacing(), scheme.t1(), scheme.length, sigma_scale))
            .collect();
        let s = DMatrix::from_fn(n, n, |i, j| lags[i.abs_diff(j)]);
        let d_diag: Vec<f64> = (0..n).map(|i| s[(i, i)].sqrt()).collect();
        let t_corr = DMatrix::from_fn(n, n, |i, j| s[(i, j)] / (d_diag[i] * d_diag[j]));
        let eig = s.clone().symmetric_eigenvalues();
        let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().cloned().fold(0.0, f64::max);
        if !(lo > 0.0) {
            return Err(Error::Conditioning {
                condition: f64::INFINITY,
            });
        }
        Ok(Self {
            scheme,
            sigma_scale,
            s,
            d_diag,
            t_corr,
            condition: hi / lo,
        })
    }

    pub fn size(&self) -> usize {
        self.s.nrows()
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j >= self.size() {
            return Err(Error::Argument(format!("index {j} outside 0..{}", self.size())));
        }
        if self.condition > MAX_CONDITION {
            return Err(Error::Conditioning {
                condition: self.condition,
            });
        }
        Ok(())
    }

    /// Smallest conditional variance over `j`, divided by `ε²`.
    pub fn c11(&self) -> Result<f64> {
        let eps2 = self.scheme.eps * self.scheme.eps;
        (0..self.size()).try_fold(f64::INFINITY, |acc, j| Ok(acc.min(conditional_variance(self, j)? / eps2)))
    }
}

/// Regression coefficients `β = S_j⁻¹ y` of the value at `x_j` on the values
/// at `x_0, …, x_{j−1}`.
pub fn beta_solve(model: &CovarianceModel, j: usize) -> Result<DVector<f64>> {
    model.check_index(j)?;
    if j == 0 {
        return Ok(DVector::zeros(0));
    }
    let sj = model.s.view((0, 0), (j, j)).into_owned();
    let y = DVector::from_fn(j, |l, _| model.s[(j, l)]);
    let chol = sj.clone().cholesky().ok_or(Error::Conditioning {
        condition: model.condition,
    })?;
    let beta = chol.solve(&y);
    let resid = (&sj * &beta - &y).norm() / y.norm().max(f64::MIN_POSITIVE);
    if resid > 1e-10 {
        return Err(Error::Conditioning {
            condition: model.condition,
        });
    }
    Ok(beta)
}

/// `Var(N_j) − yᵀβ`.
pub fn conditional_variance(model: &CovarianceModel, j: usize) -> Result<f64> {
    let beta = beta_solve(model, j)?;
    let explained: f64 = (0..j).map(|l| model.s[(j, l)] * beta[l]).sum();
    Ok(model.s[(j, j)] - explained)
}

/// Maximum absolute column sum.
pub fn matrix_norm_11(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::Argument("matrix norm of an empty matrix".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("matrix has non-finite entries".into()));
    }
    Ok(a.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max))
}

/// `η = P(|Z| ≤ 1/√C₁₁)` for a standard normal `Z`.
pub fn per_point_bound(c11: f64) -> Result<f64> {
    if !(c11 > 0.0) {
        return Err(Error::Validation(format!("conditional variance constant must be positive, got {c11}")));
    }
    Ok(erf(1.0 / (2.0 * c11).sqrt()))
}

/// Per-model diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub eps: f64,
    pub theta: f64,
    pub points: usize,
    pub variance_ratio_min: f64,
    pub variance_ratio_max: f64,
    pub beta_l1_max: f64,
    pub c11: f64,
    pub eta: f64,
    pub s_inv_norm11: f64,
    pub condition: f64,
}

pub fn summarize_model(model: &CovarianceModel) -> Result<ModelSummary> {
    let eps2 = model.scheme.eps.powi(2);
    let n = model.size();
    let (mut vmin, mut vmax) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        vmin = vmin.min(model.s[(i, i)] / eps2);
        vmax = vmax.max(model.s[(i, i)] / eps2);
    }
    let per_j: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let b = beta_solve(model, j)?;
            let cv = model.s[(j, j)] - (0..j).map(|l| model.s[(j, l)] * b[l]).sum::<f64>();
            Ok((b.lp_norm(1), cv / eps2))
        })
        .collect::<Result<_>>()?;
    let beta_l1_max = per_j.iter().map(|p| p.0).fold(0.0, f64::max);
    let c11 = per_j.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let inv = model
        .s
        .clone()
        .cholesky()
        .ok_or(Error::Conditioning {
            condition: model.condition,
        })?
        .inverse();
    Ok(ModelSummary {
        eps: model.scheme.eps,
        theta: model.scheme.theta,
        points: n,
        variance_ratio_min: vmin,
        variance_ratio_max: vmax,
        beta_l1_max,
        c11,
        eta: per_point_bound(c11)?,
        s_inv_norm11: matrix_norm_11(&inv)?,
        condition: model.condition,
    })
}

/// Monte Carlo estimate of `P(|N_k| ≤ ε for all k)` under `N(0, S)`.
pub fn grid_event_probability(model: &CovarianceModel, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::Argument("need at least one sample".into()));
    }
    let l = model
        .s
        .clone()
        .cholesky()
        .ok_or(Error::Conditioning {
            condition: model.condition,
        })?
        .l();
    let eps = model.scheme.eps;
    let n = model.size();
    let hits: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed, i));
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let x = &l * z;
            if x.iter().all(|v| v.abs() <= eps) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok((stats::mean(&hits), stats::stderr(&hits)))
}

/// Numerically estimated constants and the resulting grid choice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Constants {
    pub k1: f64,
    pub k2: f64,
    pub c2: f64,
    pub c0: f64,
    pub c0_bound: f64,
    pub c0_branch: C0Branch,
    pub theta_ref: f64,
    pub theta: f64,
    pub c8: f64,
    pub c9: f64,
    pub c10: f64,
    pub c11: f64,
    pub c_g: f64,
}

/// `[C₈, C₉]`: range of `Var/ε²` over the `ε` values.
pub fn variance_window(eps_list: &[f64], c0: f64, length: f64, scale: f64) -> Result<(f64, f64)> {
    if eps_list.is_empty() {
        return Err(Error::Argument("need at least one eps".into()));
    }
    let r: Vec<f64> = eps_list
        .iter()
        .map(|e| lag_covariance(0.0, c0 * e.powi(4), length, scale) / (e * e))
        .collect();
    Ok((
        r.iter().cloned().fold(f64::INFINITY, f64::min),
        r.iter().cloned().fold(0.0, f64::max),
    ))
}

/// `C₁₀ = sup Cov(Δ)/(ε² exp(−Δ²/(8t₁)))` over `c₁ε² ≤ Δ ≤ J/2` with
/// `c₁ = √(θ_ref·c₀)`. The ratio decreases in `Δ`, so the fit stays an upper
/// bound for every `θ ≥ θ_ref`.
pub fn fit_c10(eps_list: &[f64], c0: f64, theta_ref: f64, length: f64, scale: f64) -> Result<f64> {
    if eps_list.is_empty() {
        return Err(Error::Argument("need at least one eps".into()));
    }
    let mut sup: f64 = 0.0;
    for &e in eps_list {
        let t1 = c0 * e.powi(4);
        let lo = (theta_ref * c0).sqrt() * e * e;
        let hi = 0.5 * length;
        if lo >= hi {
            continue;
        }
        let n = 200;
        for i in 0..=n {
            // Denser near the lower end, where the supremum sits.
            let u = (i as f64 / n as f64).powi(2);
            let d = lo + (hi - lo) * u;
            let w = (-d * d / (8.0 * t1)).exp();
            if w < 1e-250 {
                break;
            }
            sup = sup.max(lag_covariance(d, t1, length, scale) / (e * e * w));
        }
    }
    Ok(sup)
}

/// Smallest `θ ≥ θ_floor` with `(C₁₀/C₈)·Σ_{k≥1} exp(−θk²/8) < 1/6`.
pub fn theta_for(c0: f64, c8: f64, c10: f64) -> f64 {
    let lhs = |th: f64| {
        let mut s = 0.0;
        for k in 1..10_000 {
            let term = (-th * (k * k) as f64 / 8.0).exp();
            s += term;
            if term < 1e-18 {
                break;
            }
        }
        c10 / c8 * s
    };
    let mut lo = theta_floor(c0);
    if lhs(lo) < 1.0 / 6.0 {
        return lo;
    }
    let mut hi = lo * 2.0;
    while lhs(hi) >= 1.0 / 6.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lhs(mid) < 1.0 / 6.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// The full dependency chain: tail constants → `c₀` bound → `C₈, C₉, C₁₀`
/// → `θ` → schemes and covariance models → `C₁₁`.
#[derive(Debug, Clone)]
pub struct Design {
    pub constants: Constants,
    pub schemes: Vec<GridScheme>,
    pub models: Vec<CovarianceModel>,
    pub summaries: Vec<ModelSummary>,
}

pub fn design(eps_list: &[f64], c0: f64, k1: f64, k2: f64, sigma_scale: f64, length: f64) -> Result<Design> {
    let c2 = sigma_scale;
    let (bound, branch) = c0_bound(k1, k2, c2);
    if !(c0 > 0.0 && c0 < bound) {
        return Err(Error::Validation(format!("c0 = {c0} must lie in (0, {bound})")));
    }
    let theta_ref = theta_floor(c0);
    let (c8, c9) = variance_window(eps_list, c0, length, sigma_scale)?;
    let c10 = fit_c10(eps_list, c0, theta_ref, length, sigma_scale)?;
    let theta = theta_for(c0, c8, c10);
    let schemes: Vec<GridScheme> = eps_list
        .iter()
        .map(|&e| GridScheme::new(e, c0, theta, length))
        .collect::<Result<_>>()?;
    let models: Vec<CovarianceModel> = schemes
        .iter()
        .map(|s| CovarianceModel::build(*s, sigma_scale))
        .collect::<Result<_>>()?;
    let summaries: Vec<ModelSummary> = models.iter().map(summarize_model).collect::<Result<_>>()?;
    let c11 = summaries.iter().map(|s| s.c11).fold(f64::INFINITY, f64::min);
    Ok(Design {
        constants: Constants {
            k1,
            k2,
            c2,
            c0,
            c0_bound: bound,
            c0_branch: branch,
            theta_ref,
            theta,
            c8,
            c9,
            c10,
            c11,
            c_g: heat_kernel::c_g(),
        },
        schemes,
        models,
        summaries,
    })
}

/// Simulation settings for the tail of `sup |N|` over `[0, αε⁴] × [0, ε²]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailSettings {
    /// Spatial cells per length `ε²`.
    pub cells_per_eps2: usize,
    /// Time steps over `[0, αε⁴]`.
    pub steps: usize,
    pub sigma_scale: f64,
    /// Tail points kept need at least this many exceedances.
    pub min_count: usize,
    pub lambda_points: usize,
}

impl Default for TailSettings {
    fn default() -> Self {
        Self {
            cells_per_eps2: 16,
            steps: 16,
            sigma_scale: 1.0,
            min_count: 20,
            lambda_points: 8,
        }
    }
}

/// `sup |N| / ε` over the box, one value per path.
pub fn simulate_tail_sups(alpha: f64, eps: f64, n_paths: usize, seed: u64, settings: &TailSettings) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !(eps > 0.0) {
        return Err(Error::Argument(format!("alpha and eps must be positive, got {alpha}, {eps}")));
    }
    let e2 = eps * eps;
    let n_x = ((settings.cells_per_eps2 as f64 / e2).round() as usize).max(2 * settings.cells_per_eps2);
    let grid = Grid::new(1.0, alpha * e2 * e2, n_x, settings.steps)?;
    let sigma = SigmaSpec::scalar(settings.sigma_scale, 1)?;
    let model = Model::centred(grid, sigma)?;
    let last = ((e2 / grid.dx()).floor() as usize).min(n_x - 1);
    (0..n_paths as u64)
        .into_par_iter()
        .map_init(
            || Stepper::new(grid),
            |st, i| {
                let noise = sample_noise(grid, 1, seed, i)?;
                let p = model.run(st, &noise, None)?;
                let mut sup: f64 = 0.0;
                for snap in &p.snapshots {
                    for m in 0..=last {
                        sup = sup.max(snap.get(m, 0).abs());
                    }
                }
                Ok(sup / eps)
            },
        )
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub lambda: f64,
    pub p: f64,
    pub stderr: f64,
    pub count: usize,
}

/// Fit of `log P(sup |N| > λε) = log(K₁/(1∧√α)) − K₂λ²/(C₂²√α)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailFit {
    pub alpha: f64,
    pub k1: f64,
    pub k2: f64,
    /// Slope of `log P` against `λ²` (negative).
    pub slope: f64,
    pub slope_se: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_paths: usize,
    pub points: Vec<TailPoint>,
}

/// Fit tail constants from pooled normalised sups.
pub fn fit_tail(alpha: f64, ratios: &[f64], c2: f64, settings: &TailSettings) -> Result<TailFit> {
    let n = ratios.len();
    let mut sorted = ratios.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    if n < 4 * settings.min_count {
        return Err(Error::InsufficientData(format!("{n} samples are too few for a tail fit")));
    }
    // From the median out to the level with `min_count` exceedances.
    let lam_lo = sorted[n / 2];
    let lam_hi = sorted[n - settings.min_count];
    if !(lam_hi > lam_lo) {
        return Err(Error::InsufficientData("tail sample has no spread".into()));
    }
    let k = settings.lambda_points.max(3);
    let mut points = Vec::with_capacity(k);
    for i in 0..k {
        let l2 = lam_lo * lam_lo + (lam_hi * lam_hi - lam_lo * lam_lo) * i as f64 / (k - 1) as f64;
        let lambda = l2.sqrt();
        let count = n - sorted.partition_point(|v| *v <= lambda);
        if count < settings.min_count {
            continue;
        }
        let p = count as f64 / n as f64;
        points.push(TailPoint {
            lambda,
            p,
            stderr: (p * (1.0 - p) / n as f64).sqrt(),
            count,
        });
    }
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "only {} tail levels have at least {} exceedances",
            points.len(),
            settings.min_count
        )));
    }
    let x: Vec<f64> = points.iter().map(|p| p.lambda * p.lambda).collect();
    let y: Vec<f64> = points.iter().map(|p| p.p.ln()).collect();
    // Var(log p̂) ≈ (1 − p)/(n p).
    let w: Vec<f64> = points.iter().map(|p| p.count as f64 / (1.0 - p.p).max(1e-12)).collect();
    let fit = stats::weighted_line_fit(&x, &y, &w)?;
    let ra = alpha.sqrt();
    let k2 = -fit.slope * c2 * c2 * ra;
    let pre = ra.min(1.0);
    let k1 = points
        .iter()
        .map(|p| p.p * pre * (k2 * p.lambda * p.lambda / (c2 * c2 * ra)).exp())
        .fold(fit.intercept.exp() * pre, f64::max);
    Ok(TailFit {
        alpha,
        k1,
        k2,
        slope: fit.slope,
        slope_se: fit.slope_se,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        n_paths: n,
        points,
    })
}

/// Simulate at each `ε`, pool `sup|N|/ε`, and fit `(K₁, K₂)`.
pub fn estimate_tail_constants(
    alpha: f64,
    eps_list: &[f64],
    n_paths: usize,
    seed: u64,
    settings: &TailSettings,
) -> Result<TailFit> {
    if eps_list.is_empty() {
        return Err(Error::Argument("need at least one eps".into()));
    }
    let mut pooled = Vec::with_capacity(n_paths * eps_list.len());
    for (i, &e) in eps_list.iter().enumerate() {
        pooled.extend(simulate_tail_sups(alpha, e, n_paths, path_seed(seed, 1000 + i as u64), settings)?);
    }
    fit_tail(alpha, &pooled, settings.sigma_scale, settings)
}

/// Symmetric slab `{x : |⟨a, x⟩| ≤ b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slab {
    pub a: Vec<f64>,
    pub b: f64,
}

impl Slab {
    pub fn contains(&self, x: &[f64]) -> bool {
        self.a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>().abs() <= self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub mu_kl: f64,
    pub mu_k: f64,
    pub mu_l: f64,
    pub se_kl: f64,
    pub se_k: f64,
    pub se_l: f64,
    /// `μ(K∩L) − μ(K)μ(L)`.
    pub gap: f64,
    /// Delta-method standard error of `gap`.
    pub gap_se: f64,
    /// `gap < −3·gap_se`.
    pub violated: bool,
    pub n_samples: usize,
}

/// Monte Carlo check of `μ(K∩L) ≥ μ(K)μ(L)` for `μ = N(0, cov)` and `K`, `L`
/// intersections of symmetric slabs.
pub fn gaussian_correlation_check(
    k: &[Slab],
    l: &[Slab],
    cov: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    let d = cov.nrows();
    if d == 0 || cov.ncols() != d {
        return Err(Error::Argument("covariance must be a non-empty square matrix".into()));
    }
    if k.iter().chain(l).any(|s| s.a.len() != d || !(s.b >= 0.0)) {
        return Err(Error::Argument("slab normals must match the dimension and widths be non-negative".into()));
    }
    if n_samples < 2 {
        return Err(Error::Argument("need at least two samples".into()));
    }
    let eig = cov.clone().symmetric_eigenvalues();
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().cloned().fold(0.0, f64::max);
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::Argument("covariance is degenerate".into()));
    }
    let chol = cov.clone().cholesky().ok_or_else(|| Error::Argument("covariance is not positive definite".into()))?;
    let lmat = chol.l();
    let flags: Vec<(bool, bool)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed, i));
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let x = &lmat * z;
            let xs = x.as_slice();
            (k.iter().all(|s| s.contains(xs)), l.iter().all(|s| s.contains(xs)))
        })
        .collect();
    let ik: Vec<f64> = flags.iter().map(|f| f.0 as u8 as f64).collect();
    let il: Vec<f64> = flags.iter().map(|f| f.1 as u8 as f64).collect();
    let ikl: Vec<f64> = flags.iter().map(|f| (f.0 && f.1) as u8 as f64).collect();
    let (mk, ml, mkl) = (stats::mean(&ik), stats::mean(&il), stats::mean(&ikl));
    let infl: Vec<f64> = (0..n_samples).map(|i| ikl[i] - ml * ik[i] - mk * il[i]).collect();
    let gap = mkl - mk * ml;
    let gap_se = stats::stderr(&infl);
    Ok(CorrelationReport {
        mu_kl: mkl,
        mu_k: mk,
        mu_l: ml,
        se_kl: stats::stderr(&ikl),
        se_k: stats::stderr(&ik),
        se_l: stats::stderr(&il),
        gap,
        gap_se,
        violated: gap < -3.0 * gap_se,
        n_samples,
    })
}
