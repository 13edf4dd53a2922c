//! Discrete space-time white noise on `[0, T] × [0, J)`.
//!
//! Each cell `[t_n, t_{n+1}) × [x_m, x_{m+1})` and component `c` carries the
//! white-noise mass of the cell, an independent `Normal(0, dt·dx)`.
//!
//! Normals come from a ChaCha8 stream keyed by the path seed. Cells are
//! paired, and pair `p` is the Box–Muller image of stream words
//! `4p..4p+4`, so any single cell can be regenerated from the seed alone
//! ([`NoisePath::cell_from_seed`]) regardless of how the array was filled.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::CircleGrid;

/// Space-time grid: `n_x` cells on the circle of length `length`, `n_t`
/// steps up to `horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub length: f64,
    pub horizon: f64,
    pub n_x: usize,
    pub n_t: usize,
}

impl Grid {
    pub fn new(length: f64, horizon: f64, n_x: usize, n_t: usize) -> Result<Self> {
        if n_x < 2 {
            return Err(Error::Argument(format!("need n_x >= 2, got {n_x}")));
        }
        if n_t < 1 {
            return Err(Error::Argument("need n_t >= 1".into()));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::domain("J", length, "must be positive"));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::domain("T", horizon, "must be positive"));
        }
        Ok(Self {
            length,
            horizon,
            n_x,
            n_t,
        })
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.length / self.n_x as f64
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_t as f64
    }

    #[inline]
    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    pub fn circle(&self) -> CircleGrid {
        CircleGrid {
            n_x: self.n_x,
            length: self.length,
        }
    }

    /// Variance of one cell increment.
    pub fn cell_variance(&self) -> f64 {
        self.dt() * self.dx()
    }
}

/// Stable 64-bit seed for replicate `index` of an experiment keyed by `master`.
pub fn path_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn open_unit(w: u64) -> f64 {
    ((w >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

#[inline]
fn box_muller(w1: u64, w2: u64) -> (f64, f64) {
    let r = (-2.0 * open_unit(w1).ln()).sqrt();
    let (s, c) = (2.0 * PI * open_unit(w2)).sin_cos();
    (r * c, r * s)
}

/// Realized noise increments for one trajectory, laid out `(t, x, component)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    grid: Grid,
    dim: usize,
    seed: u64,
    increments: Vec<f64>,
}

impl NoisePath {
    /// Draw i.i.d. `Normal(0, dt·dx)` increments for every cell and component.
    pub fn sample(grid: Grid, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("noise dimension must be at least 1".into()));
        }
        let len = grid.n_t * grid.n_x * dim;
        let sd = grid.cell_variance().sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut increments = Vec::with_capacity(len + 1);
        while increments.len() < len {
            let (a, b) = box_muller(rng.next_u64(), rng.next_u64());
            increments.push(sd * a);
            increments.push(sd * b);
        }
        increments.truncate(len);
        Ok(Self {
            grid,
            dim,
            seed,
            increments,
        })
    }

    /// Regenerate the single increment of cell `(n, m, c)` from the seed.
    pub fn cell_from_seed(grid: Grid, dim: usize, seed: u64, n: usize, m: usize, c: usize) -> f64 {
        let idx = (n * grid.n_x + m) * dim + c;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(4 * (idx as u128 / 2));
        let (a, b) = box_muller(rng.next_u64(), rng.next_u64());
        grid.cell_variance().sqrt() * if idx % 2 == 0 { a } else { b }
    }

    /// Wrap explicit increments (e.g. a perturbed or loaded path).
    pub fn from_increments(grid: Grid, dim: usize, seed: u64, increments: Vec<f64>) -> Result<Self> {
        let len = grid.n_t * grid.n_x * dim;
        if increments.len() != len {
            return Err(Error::Dimension(format!(
                "expected {len} increments, got {}",
                increments.len()
            )));
        }
        Ok(Self {
            grid,
            dim,
            seed,
            increments,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Increments of time step `n`, laid out `(x, component)`.
    #[inline]
    pub fn row(&self, n: usize) -> &[f64] {
        let w = self.grid.n_x * self.dim;
        &self.increments[n * w..(n + 1) * w]
    }

    #[inline]
    pub fn get(&self, n: usize, m: usize, c: usize) -> f64 {
        self.increments[(n * self.grid.n_x + m) * self.dim + c]
    }

    /// Brownian-scaling map from `[0, J] × [0, J²T']` onto `[0, 1] × [0, T']`:
    /// every increment is multiplied by `J^{-3/2}`, cell counts are unchanged.
    pub fn rescale(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::domain("J", factor, "scaling factor must be positive"));
        }
        if ((self.grid.length - factor) / factor).abs() > 1e-12 {
            return Err(Error::Dimension(format!(
                "source circle has length {}, expected J = {factor}",
                self.grid.length
            )));
        }
        let grid = Grid::new(
            self.grid.length / factor,
            self.grid.horizon / (factor * factor),
            self.grid.n_x,
            self.grid.n_t,
        )?;
        let s = factor.powf(-1.5);
        Ok(Self {
            grid,
            dim: self.dim,
            seed: self.seed,
            increments: self.increments.iter().map(|v| v * s).collect(),
        })
    }

    /// Merge `2 × 2` blocks of cells (two steps by two points).
    pub fn aggregate(&self) -> Result<Self> {
        let g = self.grid;
        if g.n_x % 2 != 0 || g.n_t % 2 != 0 || g.n_x < 4 {
            return Err(Error::Dimension(format!(
                "cannot halve a {} x {} grid",
                g.n_t, g.n_x
            )));
        }
        let coarse = Grid::new(g.length, g.horizon, g.n_x / 2, g.n_t / 2)?;
        let d = self.dim;
        let mut out = vec![0.0; coarse.n_t * coarse.n_x * d];
        for n in 0..g.n_t {
            for m in 0..g.n_x {
                for c in 0..d {
                    out[((n / 2) * coarse.n_x + m / 2) * d + c] += self.get(n, m, c);
                }
            }
        }
        Self::from_increments(coarse, d, self.seed, out)
    }

    /// Binary dump: `J, T` as f64 then `n_x, n_t, d, seed` as u64, all
    /// little-endian, followed by the increments as f64 in `(t, x, c)` order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.grid.length.to_le_bytes())?;
        w.write_all(&self.grid.horizon.to_le_bytes())?;
        for v in [self.grid.n_x as u64, self.grid.n_t as u64, self.dim as u64, self.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.increments {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut word)?;
            Ok(word)
        };
        let length = f64::from_le_bytes(next(&mut r)?);
        let horizon = f64::from_le_bytes(next(&mut r)?);
        let n_x = u64::from_le_bytes(next(&mut r)?) as usize;
        let n_t = u64::from_le_bytes(next(&mut r)?) as usize;
        let dim = u64::from_le_bytes(next(&mut r)?) as usize;
        let seed = u64::from_le_bytes(next(&mut r)?);
        let grid = Grid::new(length, horizon, n_x, n_t)?;
        let len = n_t * n_x * dim;
        let mut increments = Vec::with_capacity(len);
        for _ in 0..len {
            increments.push(f64::from_le_bytes(next(&mut r)?));
        }
        Self::from_increments(grid, dim, seed, increments)
    }
}

/// Draw the noise for replicate `index` of an experiment.
pub fn sample_noise(grid: Grid, dim: usize, master_seed: u64, index: u64) -> Result<NoisePath> {
    NoisePath::sample(grid, dim, path_seed(master_seed, index))
}
