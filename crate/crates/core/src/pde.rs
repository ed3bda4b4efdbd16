//! Explicit Euler integration of the 1-D advection-diffusion-reaction
//! equation
//!
//! ```text
//! ds/dt = d/dx(delta(x) ds/dx) + nu(x) ds/dx + k s^2,   s(0,t) = s(1,t) = 0
//! ```
//!
//! and assembly of operator datasets from it.
//!
//! Space is discretized with conservative central differences, `delta` being
//! averaged onto cell faces. [`adr_solve`] advances in steps of `dt` and, when
//! [`SolverOptions::stabilize`] is set, splits every step into the smallest
//! number of equal sub-steps that satisfies the explicit diffusion limit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid1D, GridFunction};
use crate::random_fields::{initial_state, AdrCoefficients, AdrPrior, GrfSampler};
use crate::rng::RngStream;

/// Resampling attempts per trajectory before giving up.
pub const MAX_RETRIES: usize = 20;

/// Fraction of the explicit diffusion limit `dx^2 / (2 delta_max)` used for
/// stabilizing sub-steps.
const STABILITY_SAFETY: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Output time step.
    pub dt: f64,
    /// Split steps that exceed the explicit diffusion limit.
    pub stabilize: bool,
    /// States whose magnitude exceeds this are treated as diverged.
    pub max_abs: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            stabilize: true,
            max_abs: 1e2,
        }
    }
}

/// One forward Euler step of size `dt`. Boundary values are held at zero.
pub fn adr_step(state: &GridFunction, coeffs: &AdrCoefficients, dt: f64) -> Result<GridFunction> {
    let mut out = state.clone();
    step_into(state.values(), coeffs, dt, out.values_mut());
    if out.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Unstable { step: 1, time: dt });
    }
    Ok(out)
}

fn step_into(s: &[f64], coeffs: &AdrCoefficients, dt: f64, out: &mut [f64]) {
    let n = s.len();
    let dx = coeffs.grid().spacing();
    let (delta, nu, k) = (coeffs.delta.values(), coeffs.nu.values(), coeffs.k_reaction);
    let inv_dx2 = 1.0 / (dx * dx);
    let inv_2dx = 0.5 / dx;
    out[0] = 0.0;
    out[n - 1] = 0.0;
    for i in 1..n - 1 {
        let d_right = 0.5 * (delta[i] + delta[i + 1]);
        let d_left = 0.5 * (delta[i - 1] + delta[i]);
        let diffusion = (d_right * (s[i + 1] - s[i]) - d_left * (s[i] - s[i - 1])) * inv_dx2;
        let advection = nu[i] * (s[i + 1] - s[i - 1]) * inv_2dx;
        let reaction = k * s[i] * s[i];
        out[i] = s[i] + dt * (diffusion + advection + reaction);
    }
}

/// Number of equal sub-steps needed for `dt` to respect the diffusion limit.
pub fn substeps(coeffs: &AdrCoefficients, dt: f64) -> usize {
    let dx = coeffs.grid().spacing();
    let d = coeffs.delta.values();
    let face_max = d
        .windows(2)
        .map(|w| 0.5 * (w[0] + w[1]))
        .fold(0.0, f64::max);
    if face_max <= 0.0 {
        return 1;
    }
    let limit = STABILITY_SAFETY * dx * dx / (2.0 * face_max);
    (dt / limit).ceil().max(1.0) as usize
}

fn check_steps(t: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t >= 0.0) {
        return Err(Error::invalid(format!("need t >= 0 and dt > 0, got t={t}, dt={dt}")));
    }
    let ratio = t / dt;
    let steps = ratio.round();
    if (ratio - steps).abs() > 0.5 + 1e-9 {
        return Err(Error::invalid(format!("t/dt = {ratio} is not near an integer")));
    }
    Ok(steps as usize)
}

/// Integrates `v0` to time `t`, returning the state after every output step
/// (the first entry is `v0` itself).
pub fn adr_trajectory(
    v0: &GridFunction,
    coeffs: &AdrCoefficients,
    t: f64,
    opts: &SolverOptions,
) -> Result<Vec<GridFunction>> {
    let mut states = vec![v0.clone()];
    integrate(v0, coeffs, t, opts, |s| states.push(s.clone()))?;
    Ok(states)
}

/// State at time `t` after `round(t / dt)` output steps.
pub fn adr_solve(
    v0: &GridFunction,
    coeffs: &AdrCoefficients,
    t: f64,
    opts: &SolverOptions,
) -> Result<GridFunction> {
    integrate(v0, coeffs, t, opts, |_| {})
}

fn integrate(
    v0: &GridFunction,
    coeffs: &AdrCoefficients,
    t: f64,
    opts: &SolverOptions,
    mut record: impl FnMut(&GridFunction),
) -> Result<GridFunction> {
    if v0.grid() != coeffs.grid() || v0.dim() != 1 {
        return Err(Error::invalid("state and coefficients must share a scalar grid"));
    }
    let steps = check_steps(t, opts.dt)?;
    let sub = if opts.stabilize { substeps(coeffs, opts.dt) } else { 1 };
    let h = opts.dt / sub as f64;
    let mut cur = v0.clone();
    let mut next = v0.values().to_vec();
    for step in 1..=steps {
        for _ in 0..sub {
            step_into(cur.values(), coeffs, h, &mut next);
            cur.values_mut().copy_from_slice(&next);
        }
        if cur.values().iter().any(|v| !v.is_finite() || v.abs() > opts.max_abs) {
            return Err(Error::Unstable {
                step,
                time: step as f64 * opts.dt,
            });
        }
        record(&cur);
    }
    Ok(cur)
}

/// Where an operator dataset came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub coefficients: AdrCoefficients,
    pub t: f64,
    pub seed: u64,
    pub stream: u64,
}

/// Example pairs `(v_i, u_i)` of a single operator.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorDataset {
    pub pairs: Vec<(GridFunction, GridFunction)>,
    pub provenance: Option<Provenance>,
    /// Trajectories rejected as unstable and redrawn.
    pub resampled: usize,
}

impl OperatorDataset {
    pub fn new(pairs: Vec<(GridFunction, GridFunction)>) -> Result<Self> {
        let ds = Self {
            pairs,
            provenance: None,
            resampled: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn grid(&self) -> Grid1D {
        self.pairs[0].0.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let (v0, u0) = self
            .pairs
            .first()
            .ok_or_else(|| Error::invalid("operator dataset needs at least one pair"))?;
        for (v, u) in &self.pairs {
            if !v.same_shape(v0) || !u.same_shape(u0) || v.grid() != u.grid() {
                return Err(Error::invalid("pairs of a dataset must share one grid and codomain"));
            }
        }
        Ok(())
    }
}

/// Integrates `n_pairs` fresh initial states to time `t`. Diverging
/// trajectories are redrawn up to [`MAX_RETRIES`] times each.
pub fn generate_operator_dataset(
    coeffs: &AdrCoefficients,
    n_pairs: usize,
    t: f64,
    sampler: &GrfSampler,
    rng: &RngStream,
    opts: &SolverOptions,
) -> Result<OperatorDataset> {
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be at least 1"));
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut resampled = 0;
    for i in 0..n_pairs {
        let mut pair_rng = rng.derive(i as u64);
        let mut attempt = 0;
        loop {
            let v = initial_state(sampler, &mut pair_rng);
            match adr_solve(&v, coeffs, t, opts) {
                Ok(u) => {
                    pairs.push((v, u));
                    break;
                }
                Err(Error::Unstable { .. }) if attempt < MAX_RETRIES => {
                    attempt += 1;
                    resampled += 1;
                }
                Err(Error::Unstable { .. }) => {
                    return Err(Error::RetryBudget {
                        retries: MAX_RETRIES,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(OperatorDataset {
        pairs,
        provenance: Some(Provenance {
            coefficients: coeffs.clone(),
            t,
            seed: rng.seed(),
            stream: rng.stream(),
        }),
        resampled,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    MetaTest,
}

/// Everything that determines a generated meta-dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n_datasets: usize,
    pub pairs: usize,
    pub grid: usize,
    pub t: f64,
    /// Correlation length of the initial states.
    pub l: f64,
    /// Distribution of the operator coefficients.
    pub prior: AdrPrior,
    pub solver: SolverOptions,
    pub seed: u64,
    pub split: Split,
}

impl GenerationConfig {
    /// Desk-scale defaults: 64 operators with 32 pairs each.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_datasets: 64,
            pairs: 32,
            grid: 100,
            t: 1.0,
            l: 0.2,
            prior: AdrPrior::default(),
            solver: SolverOptions::default(),
            seed,
            split: Split::MetaTrain,
        }
    }

    /// Full-scale defaults: 500 operators with 100 pairs each.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            n_datasets: 500,
            pairs: 100,
            ..Self::desk(seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaDataset {
    pub datasets: Vec<OperatorDataset>,
    pub config: GenerationConfig,
}

impl MetaDataset {
    pub fn new(datasets: Vec<OperatorDataset>, config: GenerationConfig) -> Result<Self> {
        let first = datasets
            .first()
            .ok_or_else(|| Error::invalid("meta-dataset needs at least one operator"))?;
        let (v0, u0) = &first.pairs[0];
        for ds in &datasets {
            ds.validate()?;
            if !ds.pairs[0].0.same_shape(v0) || !ds.pairs[0].1.same_shape(u0) {
                return Err(Error::invalid("operators of a meta-dataset must share grid and codomain"));
            }
        }
        Ok(Self { datasets, config })
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    pub fn grid(&self) -> Grid1D {
        self.datasets[0].grid()
    }

    pub fn resampled(&self) -> usize {
        self.datasets.iter().map(|d| d.resampled).sum()
    }
}

/// Generates `config.n_datasets` independent operators in parallel. Output
/// order and content depend only on the config.
pub fn generate_meta_dataset(config: &GenerationConfig) -> Result<MetaDataset> {
    if config.n_datasets == 0 {
        return Err(Error::invalid("n_datasets must be at least 1"));
    }
    let grid = Grid1D::new(config.grid)?;
    let coeff_sampler = GrfSampler::new(grid, config.prior.correlation_length)?;
    let state_sampler = GrfSampler::new(grid, config.l)?;
    let base = RngStream::new(config.seed, 0);
    let datasets = (0..config.n_datasets)
        .into_par_iter()
        .map(|i| {
            let rng = base.derive(i as u64);
            let coeffs = config.prior.sample(&coeff_sampler, &mut rng.derive(u64::MAX));
            generate_operator_dataset(&coeffs, config.pairs, config.t, &state_sampler, &rng, &config.solver)
        })
        .collect::<Result<Vec<_>>>()?;
    MetaDataset::new(datasets, config.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn constant_coeffs(grid: Grid1D, delta: f64, nu: f64, k: f64) -> AdrCoefficients {
        AdrCoefficients {
            delta: GridFunction::from_fn(grid, |_| delta),
            nu: GridFunction::from_fn(grid, |_| nu),
            k_reaction: k,
        }
    }

    #[test]
    fn trivial_steps() {
        let g = Grid1D::new(50).unwrap();
        let s = GridFunction::from_fn(g, |x| x * (1.0 - x));
        let still = constant_coeffs(g, 0.0, 0.0, 0.0);
        assert_eq!(adr_step(&s, &still, 0.01).unwrap().values(), s.values());

        let zero = GridFunction::zeros(g, 1);
        let busy = constant_coeffs(g, 0.3, -0.2, 0.25);
        assert!(adr_step(&zero, &busy, 0.01).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_reaction_step() {
        let g = Grid1D::new(10).unwrap();
        let mut vals = vec![0.5; 10];
        vals[0] = 0.0;
        vals[9] = 0.0;
        let s = GridFunction::scalar(g, vals).unwrap();
        let c = constant_coeffs(g, 0.0, 0.0, 0.2);
        let out = adr_step(&s, &c, 0.01).unwrap();
        for i in 1..9 {
            assert!((out.values()[i] - 0.5005).abs() < 1e-15);
        }
        assert_eq!(out.values()[0], 0.0);
    }

    fn sine_mode(n: usize) -> (Grid1D, GridFunction) {
        let g = Grid1D::new(n).unwrap();
        (g, GridFunction::from_fn(g, |x| if x == 1.0 { 0.0 } else { (PI * x).sin() }))
    }

    #[test]
    fn diffusion_matches_separation_of_variables() {
        let (g, v0) = sine_mode(101);
        let d0 = 0.002;
        let c = constant_coeffs(g, d0, 0.0, 0.0);
        let opts = SolverOptions {
            dt: 1e-3,
            stabilize: false,
            max_abs: 1e2,
        };
        let u = adr_solve(&v0, &c, 1.0, &opts).unwrap();
        let decay = (-d0 * PI * PI).exp();
        let err = g
            .points()
            .zip(u.values())
            .map(|(x, s)| ((PI * x).sin() * decay - s).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "max error {err}");
    }

    #[test]
    fn first_order_in_time() {
        // sin(pi x) is an eigenvector of the discrete Dirichlet Laplacian, so
        // exp(-d0 lambda_h t) sin(pi x) is the exact space-discrete solution and
        // the remaining error is purely from time stepping. Against the
        // continuous solution the O(dx^2) part would mask the dt dependence.
        let (g, v0) = sine_mode(101);
        let d0 = 0.002;
        let dx = g.spacing();
        let lambda_h = 4.0 / (dx * dx) * (PI * dx / 2.0).sin().powi(2);
        let c = constant_coeffs(g, d0, 0.0, 0.0);
        let error = |dt: f64| {
            let opts = SolverOptions {
                dt,
                stabilize: false,
                max_abs: 1e2,
            };
            let u = adr_solve(&v0, &c, 1.0, &opts).unwrap();
            let decay = (-d0 * lambda_h).exp();
            v0.values()
                .iter()
                .zip(u.values())
                .map(|(s0, s)| (s0 * decay - s).abs())
                .fold(0.0, f64::max)
        };
        let ratio = error(2e-3) / error(1e-3);
        assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_time_is_identity() {
        let g = Grid1D::new(20).unwrap();
        let s = GridFunction::from_fn(g, |x| (PI * x).sin());
        let c = constant_coeffs(g, 0.01, 0.0, 0.0);
        assert_eq!(adr_solve(&s, &c, 0.0, &SolverOptions::default()).unwrap(), s);
        let bad = SolverOptions {
            dt: 0.0,
            ..Default::default()
        };
        assert!(adr_solve(&s, &c, 1.0, &bad).is_err());
    }

    #[test]
    fn instability_is_reported() {
        let g = Grid1D::new(100).unwrap();
        let s = GridFunction::from_fn(g, |x| (PI * x).sin() + 0.01 * (40.0 * PI * x).sin());
        let c = constant_coeffs(g, 0.05, 0.0, 0.0);
        let raw = SolverOptions {
            dt: 1e-2,
            stabilize: false,
            max_abs: 1e2,
        };
        assert!(matches!(adr_solve(&s, &c, 1.0, &raw), Err(Error::Unstable { .. })));
        assert!(substeps(&c, 1e-2) > 1);
        let stable = SolverOptions { stabilize: true, ..raw };
        assert!(adr_solve(&s, &c, 1.0, &stable).is_ok());
    }

    #[test]
    fn operator_dataset_shape_and_reproducibility() {
        let g = Grid1D::new(100).unwrap();
        let sampler = GrfSampler::new(g, 0.2).unwrap();
        let coeffs = AdrPrior::default().sample(&sampler, &mut RngStream::new(1, 0));
        let rng = RngStream::new(2, 0);
        let opts = SolverOptions::default();
        let ds = generate_operator_dataset(&coeffs, 100, 1.0, &sampler, &rng, &opts).unwrap();
        assert_eq!(ds.len(), 100);
        for (v, u) in &ds.pairs {
            assert!(v.values().iter().chain(u.values()).all(|x| x.is_finite()));
            assert_eq!(u.values()[0], 0.0);
            assert_eq!(u.values()[99], 0.0);
        }
        let again = generate_operator_dataset(&coeffs, 100, 1.0, &sampler, &rng, &opts).unwrap();
        assert_eq!(ds, again);
        assert!(generate_operator_dataset(&coeffs, 0, 1.0, &sampler, &rng, &opts).is_err());
    }

    #[test]
    fn dirichlet_holds_along_trajectories() {
        let g = Grid1D::new(100).unwrap();
        let sampler = GrfSampler::new(g, 0.2).unwrap();
        let mut rng = RngStream::new(3, 0);
        let coeffs = AdrPrior::default().sample(&sampler, &mut rng);
        let v = initial_state(&sampler, &mut rng);
        if let Ok(states) = adr_trajectory(&v, &coeffs, 1.0, &SolverOptions::default()) {
            assert_eq!(states.len(), 101);
            for s in &states {
                assert_eq!(s.values()[0], 0.0);
                assert_eq!(s.values()[99], 0.0);
            }
        }
    }

    #[test]
    fn meta_dataset_is_deterministic_and_seed_dependent() {
        let mut cfg = GenerationConfig::desk(7);
        cfg.n_datasets = 4;
        cfg.pairs = 3;
        let a = generate_meta_dataset(&cfg).unwrap();
        let b = generate_meta_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for seed in 100..110 {
            cfg.seed = seed;
            let c = generate_meta_dataset(&cfg).unwrap();
            for ds in &c.datasets {
                for (v, _) in &ds.pairs {
                    assert!(a.datasets.iter().all(|d| d.pairs.iter().all(|(w, _)| w != v)));
                }
            }
        }
    }
}
