//! Uniform 1-D grids and functions sampled on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` equally spaced points `x_k = k / (n - 1)` covering `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid1D {
    n: usize,
}

impl Grid1D {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("grid needs at least 2 points, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    pub fn point(&self, k: usize) -> f64 {
        if k + 1 == self.n {
            1.0
        } else {
            k as f64 / (self.n - 1) as f64
        }
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        (0..self.n).map(|k| self.point(k))
    }
}

/// Values of a (possibly vector-valued) function at every grid point,
/// stored point-major: component `c` at point `k` is `values[k * dim + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    grid: Grid1D,
    dim: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid1D, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != grid.len() * dim {
            return Err(Error::invalid(format!(
                "grid function with {} values does not fit {} points x {dim} components",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "grid_function" });
        }
        Ok(Self { grid, dim, values })
    }

    pub fn scalar(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, 1, values)
    }

    pub fn zeros(grid: Grid1D, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![0.0; grid.len() * dim],
        }
    }

    /// Scalar function obtained by evaluating `f` at every grid point.
    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid,
            dim: 1,
            values: grid.points().map(f).collect(),
        }
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    /// Number of components per grid point.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Components at grid point `k`.
    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn same_shape(&self, other: &GridFunction) -> bool {
        self.grid == other.grid && self.dim == other.dim
    }
}
