//! Heat kernel of `½∂ₓ²` on the circle `[0, J)` with endpoints identified.
//!
//! Two series represent the same function:
//!
//! ```text
//! image   G(t,x) = Σₙ (2πt)^{-1/2} exp(-(x + nJ)² / 2t)
//! Fourier G(t,x) = J⁻¹ Σₖ exp(-(2πk/J)² t / 2) cos(2πkx / J)
//! ```
//!
//! The image sum converges fast for small `t/J²`, the Fourier sum for large
//! `t/J²`. [`evaluate`] picks the faster one; both are exposed so they can be
//! checked against each other.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::stats::{self, LineFit};

/// Relative size of the next series term at which the adaptive sums stop.
pub const SERIES_TOL: f64 = 1e-15;

const MAX_TERMS: usize = 1_000_000;

/// A point `(t, x)` on the circle of length `J`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelPoint {
    pub t: f64,
    pub x: f64,
    pub length: f64,
}

impl KernelPoint {
    pub fn new(t: f64, x: f64, length: f64) -> Self {
        Self { t, x, length }
    }

    /// Point on the unit circle.
    pub fn unit(t: f64, x: f64) -> Self {
        Self::new(t, x, 1.0)
    }

    fn check(&self) -> Result<()> {
        if !(self.length > 0.0) || !self.length.is_finite() {
            return Err(Error::domain("J", self.length, "circle length must be positive"));
        }
        if !(self.t > 0.0) || !self.t.is_finite() {
            return Err(Error::domain("t", self.t, "kernel time must be positive"));
        }
        if !self.x.is_finite() {
            return Err(Error::domain("x", self.x, "coordinate must be finite"));
        }
        Ok(())
    }

    /// Signed representative of `x mod J` in `(-J/2, J/2]`.
    fn centered(&self) -> f64 {
        let r = self.x.rem_euclid(self.length);
        if r > 0.5 * self.length {
            r - self.length
        } else {
            r
        }
    }
}

/// Reduce a coordinate of `[0, J]` to its signed distance from the origin.
///
/// Returns `x` on `[0, J/2]` and `x - J` on `(J/2, J]`.
pub fn wrap_star(x: f64, length: f64) -> Result<f64> {
    if !(length > 0.0) {
        return Err(Error::domain("J", length, "circle length must be positive"));
    }
    if !(0.0..=length).contains(&x) {
        return Err(Error::domain("x", x, format!("must lie in [0, {length}]")));
    }
    Ok(if x <= 0.5 * length { x } else { x - length })
}

/// Image sum truncated to `|n| <= truncation`.
pub fn kernel_image_sum(p: KernelPoint, truncation: usize) -> Result<f64> {
    p.check()?;
    if truncation < 1 {
        return Err(Error::Argument("image truncation must be at least 1".into()));
    }
    let xs = p.centered();
    let two_t = 2.0 * p.t;
    let mut sum = (-xs * xs / two_t).exp();
    for n in 1..=truncation {
        let s = n as f64 * p.length;
        sum += (-(xs + s).powi(2) / two_t).exp() + (-(xs - s).powi(2) / two_t).exp();
    }
    Ok(sum / (PI * two_t).sqrt())
}

/// Fourier sum truncated to `|k| <= truncation`.
pub fn kernel_fourier_sum(p: KernelPoint, truncation: usize) -> Result<f64> {
    p.check()?;
    let w = 2.0 * PI / p.length;
    let mut sum = 1.0;
    for k in 1..=truncation {
        let kw = k as f64 * w;
        sum += 2.0 * (-0.5 * kw * kw * p.t).exp() * (kw * p.x).cos();
    }
    Ok(sum / p.length)
}

/// Image sum, extended in `n` until the next pair of images is below
/// [`SERIES_TOL`] relative to the running sum.
pub fn kernel_image_adaptive(p: KernelPoint) -> Result<f64> {
    p.check()?;
    let xs = p.centered();
    let two_t = 2.0 * p.t;
    let mut sum = (-xs * xs / two_t).exp();
    for n in 1..MAX_TERMS {
        let s = n as f64 * p.length;
        let pair = (-(xs + s).powi(2) / two_t).exp() + (-(xs - s).powi(2) / two_t).exp();
        sum += pair;
        if pair <= SERIES_TOL * sum {
            break;
        }
    }
    Ok(sum / (PI * two_t).sqrt())
}

/// Fourier sum, extended in `k` until the next mode amplitude is below
/// [`SERIES_TOL`] relative to the accumulated magnitude.
pub fn kernel_fourier_adaptive(p: KernelPoint) -> Result<f64> {
    p.check()?;
    let w = 2.0 * PI / p.length;
    let mut sum = 1.0;
    let mut magnitude = 1.0;
    for k in 1..MAX_TERMS {
        let kw = k as f64 * w;
        let amp = 2.0 * (-0.5 * kw * kw * p.t).exp();
        sum += amp * (kw * p.x).cos();
        magnitude += amp;
        if amp <= SERIES_TOL * magnitude {
            break;
        }
    }
    Ok(sum / p.length)
}

/// Kernel value using the faster-converging series for the regime:
/// images for `t/J² <= 1/(2π)`, Fourier modes otherwise.
pub fn evaluate(p: KernelPoint) -> Result<f64> {
    if p.t / (p.length * p.length) <= 1.0 / (2.0 * PI) {
        kernel_image_adaptive(p)
    } else {
        kernel_fourier_adaptive(p)
    }
}

/// Kernel value for internal callers that guarantee `t > 0`.
pub(crate) fn g(t: f64, x: f64, length: f64) -> f64 {
    evaluate(KernelPoint::new(t, x, length)).expect("kernel evaluated at valid point")
}

/// Ratio `G(t,x) / [(2πt)^{-1/2} exp(-x*² / 2t)]` on the unit circle.
fn gaussian_ratio(t: f64, x: f64) -> f64 {
    let p = KernelPoint::unit(t, x);
    let xs = p.centered();
    // The image sum divided by its n = 0 term; computed directly to avoid
    // the underflow of both numerator and denominator at small t.
    let two_t = 2.0 * t;
    let mut ratio = 1.0;
    for n in 1..MAX_TERMS {
        let s = n as f64;
        let pair = ((xs * xs - (xs + s).powi(2)) / two_t).exp()
            + ((xs * xs - (xs - s).powi(2)) / two_t).exp();
        ratio += pair;
        if pair <= SERIES_TOL * ratio {
            break;
        }
    }
    ratio
}

/// Fit the constant of the Gaussian upper bound
/// `G(t,x) <= C_G (2πt)^{-1/2} exp(-x*²/2t)` as the supremum of the ratio
/// over `t ∈ [1e-4, 1]` (log grid) and `x ∈ [0, 1]`.
///
/// The ratio grows in both `t` and `|x*|`, so the supremum sits at the corner
/// `(t, x) = (1, 1/2)`, which the grid contains.
pub fn fit_c_g() -> f64 {
    let n_t = 161;
    let n_x = 201;
    let mut sup: f64 = 0.0;
    for i in 0..n_t {
        let t = 10f64.powf(-4.0 + 4.0 * i as f64 / (n_t - 1) as f64);
        for j in 0..n_x {
            let x = j as f64 / (n_x - 1) as f64;
            sup = sup.max(gaussian_ratio(t, x));
        }
    }
    sup
}

/// Fitted `C_G`, computed once per process.
pub fn c_g() -> f64 {
    static C_G: OnceLock<f64> = OnceLock::new();
    *C_G.get_or_init(fit_c_g)
}

/// Gaussian upper bound on the unit-circle kernel with the fitted `C_G`.
pub fn kernel_upper_bound(p: KernelPoint) -> Result<f64> {
    p.check()?;
    if p.t > 1.0 {
        return Err(Error::domain("t", p.t, "bound holds for t <= 1"));
    }
    if p.length != 1.0 {
        return Err(Error::domain("J", p.length, "bound is stated on the unit circle"));
    }
    let xs = p.centered();
    Ok(c_g() * (-xs * xs / (2.0 * p.t)).exp() / (2.0 * PI * p.t).sqrt())
}

/// Discrete action of the heat semigroup, `(G_t f)(x_i) = Σ_j dx G(t, x_i − x_j) f_j`.
///
/// The kernel weights are the trapezoidal samples `dx·G(t, m·dx)`, normalised
/// to unit sum so constants are preserved exactly even when `t` is below the
/// grid resolution. `t = 0` is the identity.
pub fn kernel_convolve(profile: &Field, t: f64) -> Result<Field> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::domain("t", t, "convolution time must be non-negative"));
    }
    if t == 0.0 {
        return Ok(profile.clone());
    }
    let grid = profile.grid();
    let n = grid.n_x;
    let dx = grid.dx();
    let mut weights: Vec<f64> = (0..n).map(|m| dx * g(t, m as f64 * dx, grid.length)).collect();
    let mass: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= mass);
    circular_convolve(profile, &weights)
}

fn circular_convolve(profile: &Field, weights: &[f64]) -> Result<Field> {
    let grid = profile.grid();
    let n = grid.n_x;
    if weights.len() != n {
        return Err(Error::Dimension(format!(
            "kernel has {} weights, grid has {n} points",
            weights.len()
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut w_hat: Vec<Complex<f64>> = weights.iter().map(|&w| Complex::new(w, 0.0)).collect();
    fwd.process(&mut w_hat);

    let dim = profile.dim();
    let mut out = Field::zeros(*grid, dim);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for c in 0..dim {
        for (m, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(profile.get(m, c), 0.0);
        }
        fwd.process(&mut buf);
        for (b, w) in buf.iter_mut().zip(&w_hat) {
            *b *= w;
        }
        inv.process(&mut buf);
        for (m, b) in buf.iter().enumerate() {
            out.set(m, c, b.re / n as f64);
        }
    }
    Ok(out)
}

/// Left-hand sides of the three heat-kernel energy integrals on the unit
/// circle, evaluated mode by mode:
///
/// ```text
/// space:      ∫₀ᵗ ∫₀¹ [G(r, x−z) − G(r, y−z)]² dz dr
/// increment:  ∫ₛᵗ ∫₀¹ G²(t−r, z) dz dr
/// difference: ∫₀ˢ ∫₀¹ [G(t−r, z) − G(s−r, z)]² dz dr
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyIntegrals {
    pub space: f64,
    pub increment: f64,
    pub difference: f64,
}

/// `Σ_{k≥1} e^{-(2πk)² τ} / (2πk)²`, summed until the terms are negligible.
fn decay_sum(tau: f64) -> f64 {
    decay_sum_weighted(tau, |_| 1.0)
}

fn decay_sum_weighted(tau: f64, weight: impl Fn(f64) -> f64) -> f64 {
    let mut sum = 0.0;
    for k in 1..MAX_TERMS {
        let a = (2.0 * PI * k as f64).powi(2);
        let base = (-a * tau).exp() / a;
        sum += base * weight(k as f64);
        if base <= SERIES_TOL * (1.0 / 24.0) {
            break;
        }
    }
    sum
}

/// Mode-sum evaluation of the three energy integrals. Divergent tails are
/// resummed with `Σ_{k≥1} 1/(2πk)² = 1/24` and
/// `Σ_{k≥1} (1 − cos 2πkδ)/(2πk)² = δ(1−δ)/4`, leaving only
/// exponentially convergent series.
pub fn lemma_g_integrals(s: f64, t: f64, x: f64, y: f64) -> Result<EnergyIntegrals> {
    if !(s > 0.0 && s < t && t <= 1.0) {
        return Err(Error::domain("s", s, format!("need 0 < s < t <= 1 (t = {t})")));
    }
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::domain("x", x, format!("x, y must lie in [0, 1] (y = {y})")));
    }
    let delta = (x - y).abs();
    let phase = 2.0 * PI * delta;
    let space = delta * (1.0 - delta)
        - 4.0 * decay_sum_weighted(t, |k| 1.0 - (k * phase).cos());

    let h = t - s;
    let increment = h + 1.0 / 12.0 - 2.0 * decay_sum(h);

    // (1 − e^{−as})(1 − e^{−ah/2})² expanded into exponentials.
    let half = 0.5 * h;
    let difference = 2.0
        * (1.0 / 24.0 - decay_sum(s) - 2.0 * decay_sum(half) + 2.0 * decay_sum(s + half)
            + decay_sum(h)
            - decay_sum(s + h));

    Ok(EnergyIntegrals {
        space,
        increment,
        difference,
    })
}

/// `∫₀ᴶ G(t, x) dx` by the periodic trapezoid rule on `nodes` points, which
/// is spectrally accurate once `J/nodes` is well below `√t`.
pub fn total_mass(t: f64, length: f64, nodes: usize) -> Result<f64> {
    KernelPoint::new(t, 0.0, length).check()?;
    let h = length / nodes as f64;
    let mut sum = 0.0;
    for i in 0..nodes {
        sum += evaluate(KernelPoint::new(t, i as f64 * h, length))?;
    }
    Ok(h * sum)
}

/// `|∫ G(s, x − z) G(t, z) dz − G(s + t, x)|`, trapezoid rule in `z`.
pub fn composition_defect(s: f64, t: f64, x: f64, length: f64, nodes: usize) -> Result<f64> {
    KernelPoint::new(s, x, length).check()?;
    KernelPoint::new(t, x, length).check()?;
    let h = length / nodes as f64;
    let mut sum = 0.0;
    for i in 0..nodes {
        let z = i as f64 * h;
        let xz = (x - z).rem_euclid(length);
        sum += evaluate(KernelPoint::new(s, xz, length))? * evaluate(KernelPoint::new(t, z, length))?;
    }
    Ok((h * sum - evaluate(KernelPoint::new(s + t, x, length))?).abs())
}

/// Log-log fits of the three energy integrals against the separation, each
/// over `points` log-spaced values spanning two decades: the space integral
/// in `|x − y|` at `t = 1/2`, the increment and difference integrals in
/// `t − s` at `s = 1/2`.
pub fn energy_exponents(points: usize) -> Result<[LineFit; 3]> {
    if points < 3 {
        return Err(Error::Argument("need at least three separations".into()));
    }
    let mut xs = [Vec::new(), Vec::new(), Vec::new()];
    let mut ys = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..points {
        let f = i as f64 / (points - 1) as f64;
        let delta = 10f64.powf(-4.0 + 2.0 * f);
        let h = 10f64.powf(-5.0 + 2.0 * f);
        let a = lemma_g_integrals(0.25, 0.5, 0.5, 0.5 + delta)?;
        let b = lemma_g_integrals(0.5, 0.5 + h, 0.5, 0.5)?;
        xs[0].push(delta.ln());
        ys[0].push(a.space.ln());
        for (j, v) in [(1, b.increment), (2, b.difference)] {
            xs[j].push(h.ln());
            ys[j].push(v.ln());
        }
    }
    Ok([
        stats::line_fit(&xs[0], &ys[0])?,
        stats::line_fit(&xs[1], &ys[1])?,
        stats::line_fit(&xs[2], &ys[2])?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn image_and_fourier_agree() {
        let p = KernelPoint::unit(0.1, 0.3);
        let a = kernel_image_adaptive(p).unwrap();
        let b = kernel_fourier_adaptive(p).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        let p = KernelPoint::unit(1.0, 0.5);
        assert_abs_diff_eq!(
            kernel_image_adaptive(p).unwrap(),
            kernel_fourier_adaptive(p).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn small_time_peak() {
        let v = kernel_image_sum(KernelPoint::unit(0.01, 0.0), 3).unwrap();
        assert_abs_diff_eq!(v, (2.0 * PI * 0.01).powf(-0.5), epsilon = 1e-9);
        assert_abs_diff_eq!(v, 3.9894, epsilon = 1e-4);
    }

    #[test]
    fn large_time_is_uniform() {
        let v = kernel_fourier_sum(KernelPoint::unit(10.0, 0.37), 5).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn symmetric_on_circle() {
        for &(t, x) in &[(0.01, 0.1), (0.3, 0.27), (2.0, 0.9)] {
            let a = kernel_image_sum(KernelPoint::unit(t, x), 20).unwrap();
            let b = kernel_image_sum(KernelPoint::unit(t, 1.0 - x), 20).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn image_sum_increases_with_truncation() {
        let p = KernelPoint::unit(2.0, 0.4);
        let mut prev = 0.0;
        for n in 1..10 {
            let v = kernel_image_sum(p, n).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn rejects_non_positive_time() {
        assert!(matches!(
            kernel_image_sum(KernelPoint::unit(0.0, 0.1), 2),
            Err(Error::Domain { name: "t", .. })
        ));
        assert!(kernel_fourier_sum(KernelPoint::unit(-1.0, 0.1), 2).is_err());
        assert!(kernel_image_sum(KernelPoint::unit(0.1, 0.1), 0).is_err());
    }

    #[test]
    fn wrap_star_branches() {
        assert_eq!(wrap_star(0.25, 1.0).unwrap(), 0.25);
        assert_eq!(wrap_star(0.75, 1.0).unwrap(), -0.25);
        assert_eq!(wrap_star(0.5, 1.0).unwrap(), 0.5);
        assert_eq!(wrap_star(3.0, 4.0).unwrap(), -1.0);
        assert!(wrap_star(1.5, 1.0).is_err());
        assert!(wrap_star(-0.1, 1.0).is_err());
    }

    #[test]
    fn fitted_c_g_is_finite_and_small() {
        let c = c_g();
        assert!(c.is_finite() && c >= 1.0 && c <= 4.0, "C_G = {c}");
        // Upper bound from the comparison argument: 3 + Σ_{|k|≥2} e^{-k²/4}.
        let proof: f64 = 3.0 + 2.0 * (2..50).map(|k| (-(k * k) as f64 / 4.0).exp()).sum::<f64>();
        assert!(c <= proof);
    }

    #[test]
    fn upper_bound_dominates() {
        for i in 0..40 {
            let t = 10f64.powf(-4.0 + 4.0 * (i as f64 + 0.37) / 40.0).min(1.0);
            for j in 0..37 {
                let x = (j as f64 + 0.13) / 37.0;
                let p = KernelPoint::unit(t, x);
                assert!(kernel_upper_bound(p).unwrap() >= evaluate(p).unwrap());
            }
        }
        assert!(kernel_upper_bound(KernelPoint::unit(1.5, 0.1)).is_err());
        assert!(kernel_upper_bound(KernelPoint::unit(1e-4, 0.5)).unwrap() < 1e-300);
    }

    #[test]
    fn energy_integrals_degenerate_cases() {
        let e = lemma_g_integrals(0.2, 0.7, 0.3, 0.3).unwrap();
        assert_abs_diff_eq!(e.space, 0.0, epsilon = 1e-14);
        let e = lemma_g_integrals(0.5, 0.5 + 1e-15, 0.1, 0.2).unwrap();
        assert!(e.difference.abs() < 1e-7, "{}", e.difference);
        assert!(lemma_g_integrals(0.0, 0.5, 0.1, 0.2).is_err());
        assert!(lemma_g_integrals(0.6, 0.5, 0.1, 0.2).is_err());
    }

    /// Brute-force oracle: sum the Fourier representation of the squared
    /// kernel difference and integrate in time with composite Simpson after
    /// the substitution r = v² (which removes the r^{-1/2} endpoint behaviour).
    fn increment_oracle(h: f64) -> f64 {
        let n = 4000;
        let vmax = h.sqrt();
        let f = |v: f64| {
            let r = v * v;
            if r == 0.0 {
                // Σ_k e^{-(2πk)² r} ~ (4πr)^{-1/2}, so 2v·(…) → 1/√π.
                return 1.0 / PI.sqrt();
            }
            let theta = g(2.0 * r, 0.0, 1.0);
            2.0 * v * theta
        };
        let hstep = vmax / n as f64;
        let mut s = f(0.0) + f(vmax);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(i as f64 * hstep);
        }
        s * hstep / 3.0
    }

    #[test]
    fn increment_integral_matches_quadrature() {
        // Starting the window at s = 1e-12 stands in for s = 0.
        let t = 0.01;
        let e = lemma_g_integrals(1e-12, t, 0.0, 0.0).unwrap();
        let oracle = increment_oracle(t - 1e-12);
        assert!((e.increment - oracle).abs() < 1e-8 * oracle, "{} vs {oracle}", e.increment);
        // Small-time asymptotic √(t/π); image corrections are below e^{-25}.
        let asym = (t / PI).sqrt();
        assert!((e.increment - asym).abs() < 0.02 * asym);
    }

    #[test]
    fn space_integral_matches_mode_sum() {
        // Direct (slowly convergent) mode sum with many terms as oracle.
        let (t, x, y) = (0.5, 0.2, 0.45);
        let e = lemma_g_integrals(0.1, t, x, y).unwrap();
        let delta: f64 = (x - y).abs();
        let mut direct = 0.0;
        for k in 1..2_000_000 {
            let a = (2.0 * PI * k as f64).powi(2);
            direct += 4.0 * (1.0 - (-a * t).exp()) * (1.0 - (2.0 * PI * k as f64 * delta).cos()) / a;
        }
        assert_abs_diff_eq!(e.space, direct, epsilon = 1e-7);
    }

    #[test]
    fn difference_integral_matches_mode_sum() {
        let (s, t) = (0.3, 0.34);
        let e = lemma_g_integrals(s, t, 0.0, 0.0).unwrap();
        let mut direct = 0.0;
        for k in 1..2_000_000 {
            let a = (2.0 * PI * k as f64).powi(2);
            direct += 2.0 * (1.0 - (-a * s).exp()) / a * (1.0 - (-a * (t - s) / 2.0).exp()).powi(2);
        }
        assert_abs_diff_eq!(e.difference, direct, epsilon = 1e-7);
    }

    #[test]
    fn energy_exponents_near_one_and_half() {
        let [space, inc, diff] = energy_exponents(9).unwrap();
        assert!((space.slope - 1.0).abs() < 0.05);
        assert!((inc.slope - 0.5).abs() < 0.05);
        assert!((diff.slope - 0.5).abs() < 0.05);
    }

    #[test]
    fn mass_and_composition() {
        for &t in &[1e-3, 0.1, 5.0] {
            assert_abs_diff_eq!(total_mass(t, 1.0, 2048).unwrap(), 1.0, epsilon = 1e-10);
        }
        assert!(composition_defect(0.01, 0.02, 0.3, 1.0, 2048).unwrap() < 1e-8);
    }
}
