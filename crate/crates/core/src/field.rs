//! Spatial grids on the circle and vector-valued profiles sampled on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid of `n_x` points on the circle `[0, length)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleGrid {
    pub n_x: usize,
    pub length: f64,
}

impl CircleGrid {
    pub fn new(n_x: usize, length: f64) -> Result<Self> {
        if n_x < 2 {
            return Err(Error::Argument(format!("need at least 2 spatial cells, got {n_x}")));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::domain("J", length, "circle length must be positive"));
        }
        Ok(Self { n_x, length })
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.length / self.n_x as f64
    }

    #[inline]
    pub fn x(&self, m: usize) -> f64 {
        (m % self.n_x) as f64 * self.dx()
    }

    /// Index of `m + offset` on the circle.
    #[inline]
    pub fn wrap(&self, m: isize) -> usize {
        m.rem_euclid(self.n_x as isize) as usize
    }
}

/// A `d`-component profile on a [`CircleGrid`], stored point-major:
/// `values[m * d + c]` is component `c` at `x_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: CircleGrid,
    dim: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: CircleGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![0.0; grid.n_x * dim],
        }
    }

    pub fn from_values(grid: CircleGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("field dimension must be at least 1".into()));
        }
        if values.len() != grid.n_x * dim {
            return Err(Error::Dimension(format!(
                "expected {} values for {} points x {dim} components, got {}",
                grid.n_x * dim,
                grid.n_x,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite field entry at index {i}")));
        }
        Ok(Self { grid, dim, values })
    }

    /// Sample `f(x)` at every grid point.
    pub fn from_fn(grid: CircleGrid, dim: usize, f: impl Fn(f64, &mut [f64])) -> Self {
        let mut field = Self::zeros(grid, dim);
        for m in 0..grid.n_x {
            let x = grid.x(m);
            f(x, field.point_mut(m));
        }
        field
    }

    pub fn constant(grid: CircleGrid, value: &[f64]) -> Self {
        Self::from_fn(grid, value.len(), |_, out| out.copy_from_slice(value))
    }

    #[inline]
    pub fn grid(&self) -> &CircleGrid {
        &self.grid
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, m: usize, c: usize) -> f64 {
        self.values[m * self.dim + c]
    }

    #[inline]
    pub fn set(&mut self, m: usize, c: usize, v: f64) {
        self.values[m * self.dim + c] = v;
    }

    #[inline]
    pub fn point(&self, m: usize) -> &[f64] {
        &self.values[m * self.dim..(m + 1) * self.dim]
    }

    #[inline]
    pub fn point_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.values[m * self.dim..(m + 1) * self.dim]
    }

    /// Euclidean norm of the vector at `x_m`.
    #[inline]
    pub fn norm_at(&self, m: usize) -> f64 {
        self.point(m).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `max_m |u(x_m)|`.
    pub fn sup_norm(&self) -> f64 {
        (0..self.grid.n_x).map(|m| self.norm_at(m)).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Field) -> Result<()> {
        if self.grid != other.grid || self.dim != other.dim {
            return Err(Error::Dimension(format!(
                "field shapes differ: {} points x {} vs {} points x {}",
                self.grid.n_x, self.dim, other.grid.n_x, other.dim
            )));
        }
        Ok(())
    }

    /// `self + scale * other`, in place.
    pub fn axpy(&mut self, scale: f64, other: &Field) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Field) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_wraps() {
        let g = CircleGrid::new(8, 2.0).unwrap();
        assert_eq!(g.wrap(-1), 7);
        assert_eq!(g.wrap(9), 1);
        assert_eq!(g.x(10), 0.5);
    }

    #[test]
    fn rejects_bad_shapes() {
        let g = CircleGrid::new(4, 1.0).unwrap();
        assert!(Field::from_values(g, 2, vec![0.0; 7]).is_err());
        assert!(Field::from_values(g, 1, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(CircleGrid::new(1, 1.0).is_err());
    }

    #[test]
    fn sup_norm_uses_vector_length() {
        let g = CircleGrid::new(3, 1.0).unwrap();
        let f = Field::from_values(g, 2, vec![0.0, 0.0, 3.0, 4.0, 1.0, 0.0]).unwrap();
        assert_eq!(f.sup_norm(), 5.0);
    }
}
