//! Exact heat-semigroup action on the grid Fourier modes.
//!
//! On a circle of length `J` with `n_x` points, mode `k` (folded to
//! `|k| <= n_x/2`) is an eigenfunction of `½∂ₓ²` with eigenvalue `−λₖ`,
//! `λₖ = (2πk/J)² / 2`. One step of length `dt` multiplies it by
//! `e^{−λₖ dt}`; a forcing held constant over the step contributes
//! `φ(λₖ) = (1 − e^{−λₖ dt}) / λₖ` (and `dt` for `k = 0`).

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;
use crate::field::{CircleGrid, Field};

/// Per-step spectral multipliers for a fixed grid and time step.
#[derive(Clone)]
pub struct HeatPropagator {
    grid: CircleGrid,
    dt: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    lambda: Vec<f64>,
    decay: Vec<f64>,
    phi: Vec<f64>,
}

impl std::fmt::Debug for HeatPropagator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeatPropagator")
            .field("grid", &self.grid)
            .field("dt", &self.dt)
            .finish()
    }
}

/// Scratch buffers for one worker.
#[derive(Debug, Clone)]
pub struct Workspace {
    a: Vec<Complex<f64>>,
    b: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl HeatPropagator {
    pub fn new(grid: CircleGrid, dt: f64) -> Self {
        let n = grid.n_x;
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let lambda: Vec<f64> = (0..n).map(|k| eigenvalue(grid, k)).collect();
        let decay = lambda.iter().map(|l| (-l * dt).exp()).collect();
        let phi = lambda
            .iter()
            .map(|&l| if l == 0.0 { dt } else { -(-l * dt).exp_m1() / l })
            .collect();
        Self {
            grid,
            dt,
            fwd,
            inv,
            lambda,
            decay,
            phi,
        }
    }

    pub fn grid(&self) -> &CircleGrid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn workspace(&self) -> Workspace {
        let n = self.grid.n_x;
        let s = self.fwd.get_inplace_scratch_len().max(self.inv.get_inplace_scratch_len());
        Workspace {
            a: vec![Complex::default(); n],
            b: vec![Complex::default(); n],
            scratch: vec![Complex::default(); s],
        }
    }

    /// `out = S_dt a + Φ_dt b`, where `b` is a forcing held constant over the step.
    pub fn advance(&self, a: &Field, b: Option<&Field>, out: &mut Field, ws: &mut Workspace) -> Result<()> {
        a.same_shape(out)?;
        if let Some(b) = b {
            a.same_shape(b)?;
        }
        let n = self.grid.n_x;
        let norm = 1.0 / n as f64;
        for c in 0..a.dim() {
            load(a, c, &mut ws.a);
            self.fwd.process_with_scratch(&mut ws.a, &mut ws.scratch);
            match b {
                Some(b) => {
                    load(b, c, &mut ws.b);
                    self.fwd.process_with_scratch(&mut ws.b, &mut ws.scratch);
                    for k in 0..n {
                        ws.a[k] = ws.a[k] * self.decay[k] + ws.b[k] * self.phi[k];
                    }
                }
                None => {
                    for k in 0..n {
                        ws.a[k] *= self.decay[k];
                    }
                }
            }
            self.inv.process_with_scratch(&mut ws.a, &mut ws.scratch);
            for m in 0..n {
                out.set(m, c, ws.a[m].re * norm);
            }
        }
        Ok(())
    }

    /// Apply an arbitrary real mode multiplier `μ(λₖ)` to every component.
    pub fn apply_multiplier(&self, f: &Field, mult: impl Fn(f64) -> f64) -> Result<Field> {
        let factors: Vec<f64> = self.lambda.iter().map(|&l| mult(l)).collect();
        let mut out = Field::zeros(self.grid, f.dim());
        self.apply_factors(f, &factors, &mut out, &mut self.workspace())?;
        Ok(out)
    }

    /// Multiply DFT mode `k` by `factors[k]`.
    pub fn apply_factors(&self, f: &Field, factors: &[f64], out: &mut Field, ws: &mut Workspace) -> Result<()> {
        let n = self.grid.n_x;
        if f.grid() != &self.grid || factors.len() != n {
            return Err(crate::error::Error::Dimension("field grid differs from propagator grid".into()));
        }
        f.same_shape(out)?;
        for c in 0..f.dim() {
            load(f, c, &mut ws.a);
            self.fwd.process_with_scratch(&mut ws.a, &mut ws.scratch);
            for k in 0..n {
                ws.a[k] *= factors[k];
            }
            self.inv.process_with_scratch(&mut ws.a, &mut ws.scratch);
            for m in 0..n {
                out.set(m, c, ws.a[m].re / n as f64);
            }
        }
        Ok(())
    }

    /// `λₖ` for every DFT index.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.lambda
    }

    /// Exact semigroup `S_t f` for any `t >= 0`.
    pub fn semigroup(&self, f: &Field, t: f64) -> Result<Field> {
        self.apply_multiplier(f, |l| (-l * t).exp())
    }

    /// Spectral `½∂ₓ² f`.
    pub fn half_laplacian(&self, f: &Field) -> Result<Field> {
        self.apply_multiplier(f, |l| -l)
    }

    /// `Φ_dt⁻¹ f`, the inverse of the constant-forcing weight of one step.
    pub fn phi_inverse(&self, f: &Field) -> Result<Field> {
        let dt = self.dt;
        self.apply_multiplier(f, move |l| if l == 0.0 { 1.0 / dt } else { -l / (-l * dt).exp_m1() })
    }
}

/// `λₖ` for FFT bin `k`.
pub fn eigenvalue(grid: CircleGrid, k: usize) -> f64 {
    let n = grid.n_x;
    let folded = k.min(n - k) as f64;
    let w = 2.0 * PI * folded / grid.length;
    0.5 * w * w
}

fn load(f: &Field, c: usize, buf: &mut [Complex<f64>]) {
    for (m, b) in buf.iter_mut().enumerate() {
        *b = Complex::new(f.get(m, c), 0.0);
    }
}
