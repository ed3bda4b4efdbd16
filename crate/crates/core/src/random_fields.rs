//! Gaussian random fields on [`Grid1D`] and the random coefficient functions
//! of the advection-diffusion-reaction operator family.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid1D, GridFunction};
use crate::rng::RngStream;

/// Default correlation length of every random field.
pub const DEFAULT_CORRELATION_LENGTH: f64 = 0.2;

const JITTER_START: f64 = 1e-9;
const JITTER_MAX: f64 = 1e-5;

/// `K[i][j] = exp(-(x_i - x_j)^2 / (2 l^2))`, row-major.
pub fn covariance_matrix(grid: Grid1D, l: f64) -> Result<Vec<f64>> {
    check_length(l)?;
    let n = grid.len();
    let pts: Vec<f64> = grid.points().collect();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = 1.0;
        for j in 0..i {
            let d = pts[i] - pts[j];
            let v = (-d * d / (2.0 * l * l)).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    Ok(k)
}

fn check_length(l: f64) -> Result<()> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::invalid(format!("correlation length must be positive, got {l}")));
    }
    Ok(())
}

/// Draws from the zero-mean field with squared-exponential covariance.
///
/// The Cholesky factor of `K + jitter I` is computed once; jitter starts at
/// `1e-9` and grows tenfold up to `1e-5` until the factorization succeeds.
#[derive(Clone, Debug)]
pub struct GrfSampler {
    grid: Grid1D,
    l: f64,
    jitter: f64,
    /// Lower-triangular factor, row-major.
    chol: Vec<f64>,
}

impl GrfSampler {
    pub fn new(grid: Grid1D, l: f64) -> Result<Self> {
        let n = grid.len();
        let k = covariance_matrix(grid, l)?;
        let mut jitter = JITTER_START;
        loop {
            let mut m = DMatrix::from_row_slice(n, n, &k);
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(c) = m.cholesky() {
                let lower = c.unpack();
                let mut chol = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..=i {
                        chol[i * n + j] = lower[(i, j)];
                    }
                }
                return Ok(Self {
                    grid,
                    l,
                    jitter,
                    chol,
                });
            }
            jitter *= 10.0;
            if jitter > JITTER_MAX * (1.0 + 1e-9) {
                return Err(Error::Cholesky { jitter: JITTER_MAX });
            }
        }
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    pub fn correlation_length(&self) -> f64 {
        self.l
    }

    /// Diagonal jitter that made the factorization succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn sample(&self, rng: &mut RngStream) -> GridFunction {
        let n = self.grid.len();
        let z: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let values = (0..n)
            .map(|i| {
                self.chol[i * n..i * n + i + 1]
                    .iter()
                    .zip(&z)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        GridFunction::scalar(self.grid, values).expect("finite field sample")
    }
}

/// One draw from the zero-mean field with correlation length `l`.
pub fn sample_grf(grid: Grid1D, l: f64, rng: &mut RngStream) -> Result<GridFunction> {
    Ok(GrfSampler::new(grid, l)?.sample(rng))
}

/// `m(x) = 1 - (2x - 1)^10`, vanishing at both ends of `[0, 1]`.
pub fn mask_value(x: f64) -> f64 {
    1.0 - (2.0 * x - 1.0).powi(10)
}

pub fn boundary_mask(grid: Grid1D) -> GridFunction {
    GridFunction::from_fn(grid, mask_value)
}

/// Diffusion, advection and reaction coefficients of one operator.
#[derive(Clone, Debug, PartialEq)]
pub struct AdrCoefficients {
    /// Diffusion `delta(x) >= 0`.
    pub delta: GridFunction,
    /// Advection velocity `nu(x)`.
    pub nu: GridFunction,
    /// Reaction rate `k >= 0`.
    pub k_reaction: f64,
}

impl AdrCoefficients {
    pub fn grid(&self) -> Grid1D {
        self.delta.grid()
    }
}

/// Distribution of [`AdrCoefficients`]:
/// `delta = diffusion_scale * u^2 * m`, `nu = advection_scale * y * m` with
/// independent fields `u`, `y`, and `k ~ U[0, reaction_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdrPrior {
    pub correlation_length: f64,
    pub diffusion_scale: f64,
    pub advection_scale: f64,
    pub reaction_max: f64,
}

impl Default for AdrPrior {
    fn default() -> Self {
        Self {
            correlation_length: DEFAULT_CORRELATION_LENGTH,
            diffusion_scale: 0.01,
            advection_scale: 0.05,
            reaction_max: 0.3,
        }
    }
}

impl AdrPrior {
    pub fn with_length(l: f64) -> Self {
        Self {
            correlation_length: l,
            ..Self::default()
        }
    }

    pub fn sample(&self, sampler: &GrfSampler, rng: &mut RngStream) -> AdrCoefficients {
        let grid = sampler.grid();
        let mask = boundary_mask(grid);
        let u = sampler.sample(rng);
        let y = sampler.sample(rng);
        let delta = u
            .values()
            .iter()
            .zip(mask.values())
            .map(|(u, m)| self.diffusion_scale * u * u * m)
            .collect();
        let nu = y
            .values()
            .iter()
            .zip(mask.values())
            .map(|(y, m)| self.advection_scale * y * m)
            .collect();
        let k_reaction = rng.uniform(0.0, self.reaction_max);
        AdrCoefficients {
            delta: GridFunction::scalar(grid, delta).expect("finite"),
            nu: GridFunction::scalar(grid, nu).expect("finite"),
            k_reaction,
        }
    }
}

/// Coefficients drawn from the default prior with correlation length `l`.
pub fn sample_adr_coefficients(grid: Grid1D, l: f64, rng: &mut RngStream) -> Result<AdrCoefficients> {
    let sampler = GrfSampler::new(grid, l)?;
    Ok(AdrPrior::with_length(l).sample(&sampler, rng))
}

/// Initial state `v = m * u` with a fresh field draw `u`.
pub fn initial_state(sampler: &GrfSampler, rng: &mut RngStream) -> GridFunction {
    let mut v = sampler.sample(rng);
    let grid = v.grid();
    for (k, x) in v.values_mut().iter_mut().enumerate() {
        *x *= mask_value(grid.point(k));
    }
    v
}

pub fn sample_initial_state(grid: Grid1D, l: f64, rng: &mut RngStream) -> Result<GridFunction> {
    Ok(initial_state(&GrfSampler::new(grid, l)?, rng))
}
