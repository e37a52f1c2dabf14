//! Convergence-rate experiments on the linear test problems.
//!
//! Two studies drive everything: the *marginal* study compares RWMH (run
//! directly against the closed-form marginal posterior), PMMH and MCwM
//! while sweeping the inner sample size `M`, the observation noise scale
//! `sigma` or the discretization parameter `h`; the *averaged* study
//! tracks how the Gaussian-mixture approximation of the averaged posterior
//! converges as `h` shrinks at fixed `M`, optionally cross-checked by
//! pooled MwMC chains. A third runner measures the root-mean-square
//! quadrature Hellinger distance between the closed-form measures and
//! their Monte Carlo approximations, the quantity whose `h^s / sqrt(M)`
//! scaling the rate fits verify.
//!
//! Replicates over configurations form an embarrassingly parallel job set;
//! all randomness is derived from (seed, replicate) streams, so results do
//! not depend on scheduling. Each returned row is reproducible bitwise.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::analytic::{
    averaged_posterior, marginal_posterior, mixture_density_fn, mixture_moments,
    LinearGaussianProblem, RandomizedLinearGaussianProblem,
};
use crate::diagnostics::{fit_rate, hellinger_quadrature, moment_error, GridSpec, RateFit};
use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::gaussian::GaussianMeasure;
use crate::potential::Observation;
use crate::rng::{derived_stream, SeededRng};
use crate::samplers::{mcwm, mwmc_frozen, pmmh, rwmh, ChainConfig};

const STREAM_PROBLEM: u64 = 100;
const STREAM_XI: u64 = 101;
const STREAM_CHAIN: u64 = 102;

/// Default chain length in paper-fidelity mode.
pub const PAPER_CHAIN_LENGTH: usize = 1_000_000;
/// Default chain length in CI mode (tolerances widen by sqrt(10)).
pub const CI_CHAIN_LENGTH: usize = 100_000;
/// Default replicate seeds per configuration.
pub const DEFAULT_REPLICATES: usize = 8;

/// Sampling method of one result row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    RwmhReference,
    Pmmh,
    Mcwm,
    Mwmc,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::RwmhReference => "RWMH_reference",
            Method::Pmmh => "PMMH",
            Method::Mcwm => "MCwM",
            Method::Mwmc => "MwMC",
        }
    }

    fn stream_tag(&self) -> u64 {
        match self {
            Method::RwmhReference => 0,
            Method::Pmmh => 1,
            Method::Mcwm => 2,
            Method::Mwmc => 3,
        }
    }
}

/// Which parameter a marginal-study sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariable {
    M,
    Sigma,
    H,
}

impl SweepVariable {
    pub fn label(&self) -> &'static str {
        match self {
            SweepVariable::M => "M",
            SweepVariable::Sigma => "sigma",
            SweepVariable::H => "h",
        }
    }

    /// The sweep grid used when a configuration does not name one:
    /// `M` in powers of two up to 256, `sigma` log-spaced over
    /// `[1e-2, 1]`, `h` in inverse powers of two down to `2^-8`.
    pub fn default_values(&self) -> Vec<f64> {
        match self {
            SweepVariable::M => (0..9).map(|k| f64::from(1u32 << k)).collect(),
            SweepVariable::Sigma => (0..9)
                .map(|k| 10f64.powf(-2.0 + 2.0 * k as f64 / 8.0))
                .collect(),
            SweepVariable::H => (1..=8).map(|k| 0.5f64.powi(k)).collect(),
        }
    }
}

/// One record of a sweep: method, swept value, replicate and the observed
/// acceptance ratio and moment errors against the analytic reference.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub method: Method,
    pub sweep_variable: SweepVariable,
    pub sweep_value: f64,
    pub replicate: usize,
    pub acceptance_ratio: f64,
    pub mean_error: f64,
    pub cov_error: f64,
    pub forward_evals: u64,
    pub wall_time_seconds: f64,
}

/// Shape of a generated linear problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub d: usize,
    pub m_dim: usize,
    pub h: f64,
    pub sigma: f64,
    pub u_dagger: DVector<f64>,
}

/// Sigma-independent random pieces of a problem, drawn once per replicate
/// so that sweeps vary only the swept parameter.
struct ProblemPieces {
    a: DMatrix<f64>,
    beta0: DVector<f64>,
}

fn draw_pieces(d: usize, m_dim: usize, rng: &mut SeededRng) -> ProblemPieces {
    let a = DMatrix::from_fn(m_dim, d, |_, _| rng.uniform_in(-1.0, 1.0));
    let beta0 = rng.standard_normal_vector(m_dim);
    ProblemPieces { a, beta0 }
}

fn assemble_problem(
    pieces: &ProblemPieces,
    spec: &ProblemSpec,
) -> Result<RandomizedLinearGaussianProblem> {
    if spec.u_dagger.len() != spec.d {
        return Err(Error::DimensionMismatch {
            expected: spec.d,
            actual: spec.u_dagger.len(),
        });
    }
    let y = &pieces.a * &spec.u_dagger + &pieces.beta0 * spec.sigma;
    let base = LinearGaussianProblem::new(
        pieces.a.clone(),
        DMatrix::identity(spec.m_dim, spec.m_dim)
            * (spec.sigma * spec.sigma).max(f64::MIN_POSITIVE),
        DVector::zeros(spec.d),
        DMatrix::identity(spec.d, spec.d),
        y,
    )?;
    RandomizedLinearGaussianProblem::new(
        base,
        DMatrix::identity(spec.m_dim, spec.d),
        DMatrix::identity(spec.m_dim, spec.m_dim),
        spec.h,
    )
}

/// Generates the standing linear test problem: `A` with entries uniform in
/// `(-1, 1)`, perturbation `P = I`, noise `Q = I`, observation
/// `y = A u_dagger + sigma beta`, standard normal prior.
pub fn generate_problem(
    spec: &ProblemSpec,
    rng: &mut SeededRng,
) -> Result<RandomizedLinearGaussianProblem> {
    let pieces = draw_pieces(spec.d, spec.m_dim, rng);
    assemble_problem(&pieces, spec)
}

/// Configuration of the marginal-posterior study.
#[derive(Debug, Clone)]
pub struct MarginalExperimentConfig {
    pub d: usize,
    pub m_dim: usize,
    /// Discretization parameter when not swept.
    pub h: f64,
    /// Observation noise scale when not swept.
    pub sigma: f64,
    /// Inner Monte Carlo sample size when not swept.
    pub inner_m: usize,
    pub n_steps: usize,
    pub replicates: usize,
    pub u_dagger: DVector<f64>,
    pub seed: u64,
    pub sweep_variable: SweepVariable,
    /// Explicit sweep grid; empty means the default grid of the variable.
    pub sweep_values: Vec<f64>,
}

impl MarginalExperimentConfig {
    /// Paper-fidelity defaults: `N = 10^6`, `h = 0.25`, `sigma = 0.1`,
    /// `M = 16`, `u_dagger = (1, 2, 3)`.
    pub fn paper_default(sweep_variable: SweepVariable, seed: u64) -> Self {
        Self {
            d: 3,
            m_dim: 3,
            h: 0.25,
            sigma: 0.1,
            inner_m: 16,
            n_steps: PAPER_CHAIN_LENGTH,
            replicates: DEFAULT_REPLICATES,
            u_dagger: DVector::from_vec(vec![1.0, 2.0, 3.0]),
            seed,
            sweep_variable,
            sweep_values: Vec::new(),
        }
    }

    /// CI defaults: chain length shrunk tenfold, everything else as in the
    /// paper-fidelity mode.
    pub fn ci_default(sweep_variable: SweepVariable, seed: u64) -> Self {
        Self {
            n_steps: CI_CHAIN_LENGTH,
            ..Self::paper_default(sweep_variable, seed)
        }
    }

    pub fn effective_sweep_values(&self) -> Vec<f64> {
        if self.sweep_values.is_empty() {
            self.sweep_variable.default_values()
        } else {
            self.sweep_values.clone()
        }
    }
}

/// Runs the marginal study: for every sweep value and replicate, builds the
/// problem, takes the closed-form marginal posterior as reference and
/// proposal covariance, and runs the RWMH reference, PMMH and MCwM chains.
/// Rows are sorted by method, sweep value and replicate.
pub fn run_marginal_experiment(config: &MarginalExperimentConfig) -> Result<Vec<SweepResult>> {
    let values = config.effective_sweep_values();
    if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidArgument(
            "sweep values must be finite and positive".into(),
        ));
    }
    if config.sweep_variable == SweepVariable::M && values.iter().any(|v| v.fract() != 0.0) {
        return Err(Error::InvalidArgument(
            "sweeping M needs integer sweep values".into(),
        ));
    }

    let jobs: Vec<(usize, usize)> = (0..values.len())
        .flat_map(|vi| (0..config.replicates).map(move |r| (vi, r)))
        .collect();

    let mut rows: Vec<SweepResult> = jobs
        .par_iter()
        .map(|&(vi, replicate)| -> Result<Vec<SweepResult>> {
            let value = values[vi];
            let (h, sigma, inner_m) = match config.sweep_variable {
                SweepVariable::M => (config.h, config.sigma, value as usize),
                SweepVariable::Sigma => (config.h, value, config.inner_m),
                SweepVariable::H => (value, config.sigma, config.inner_m),
            };
            let mut problem_rng = SeededRng::new(
                config.seed,
                derived_stream(0, &[STREAM_PROBLEM, replicate as u64]),
            );
            let pieces = draw_pieces(config.d, config.m_dim, &mut problem_rng);
            let spec = ProblemSpec {
                d: config.d,
                m_dim: config.m_dim,
                h,
                sigma,
                u_dagger: config.u_dagger.clone(),
            };
            let problem = assemble_problem(&pieces, &spec)?;
            let reference = marginal_posterior(&problem)?;
            let prior = problem.base().prior().clone();
            let obs = Observation::new(
                problem.base().y().clone(),
                problem.base().gamma().clone(),
            )?;
            let map = problem.forward_map();

            let chain_config = |method: Method| {
                ChainConfig::new(config.n_steps, reference.covariance().clone(), config.seed)
                    .with_stream(derived_stream(
                        0,
                        &[STREAM_CHAIN, method.stream_tag(), replicate as u64],
                    ))
                    .with_inner_m(inner_m)
            };

            let mut out = Vec::with_capacity(3);
            // RWMH run directly against the closed-form marginal target.
            {
                let obs_h = Observation::new(problem.base().y().clone(), problem.gamma_h())?;
                let a_h = problem.a_h();
                let prior_chol = prior.cholesky().clone();
                let prior_mean = prior.mean().clone();
                let target = |u: &DVector<f64>| {
                    let residual = obs_h.whiten(&(obs_h.y() - &a_h * u));
                    let centered = prior_chol.solve_lower(&(u - &prior_mean));
                    -0.5 * residual.norm_squared() - 0.5 * centered.norm_squared()
                };
                let start = Instant::now();
                let chain = rwmh(target, &prior, &chain_config(Method::RwmhReference))?;
                let err = moment_error(chain.states(), &reference, "marginal")?;
                out.push(SweepResult {
                    method: Method::RwmhReference,
                    sweep_variable: config.sweep_variable,
                    sweep_value: value,
                    replicate,
                    acceptance_ratio: chain.acceptance_ratio(),
                    mean_error: err.mean_error,
                    cov_error: err.cov_error,
                    forward_evals: chain.forward_evals(),
                    wall_time_seconds: start.elapsed().as_secs_f64(),
                });
            }
            for method in [Method::Pmmh, Method::Mcwm] {
                let start = Instant::now();
                let chain = match method {
                    Method::Pmmh => pmmh(&obs, &map, &prior, &chain_config(method))?,
                    Method::Mcwm => mcwm(&obs, &map, &prior, &chain_config(method))?,
                    _ => unreachable!(),
                };
                let err = moment_error(chain.states(), &reference, "marginal")?;
                out.push(SweepResult {
                    method,
                    sweep_variable: config.sweep_variable,
                    sweep_value: value,
                    replicate,
                    acceptance_ratio: chain.acceptance_ratio(),
                    mean_error: err.mean_error,
                    cov_error: err.cov_error,
                    forward_evals: chain.forward_evals(),
                    wall_time_seconds: start.elapsed().as_secs_f64(),
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    sort_rows(&mut rows);
    Ok(rows)
}

fn sort_rows(rows: &mut [SweepResult]) {
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.sweep_value.partial_cmp(&b.sweep_value).expect("finite"))
            .then(a.replicate.cmp(&b.replicate))
    });
}

/// Configuration of the averaged-posterior study.
#[derive(Debug, Clone)]
pub struct AveragedExperimentConfig {
    pub d: usize,
    pub m_dim: usize,
    /// Number of frozen forward-map realizations `M`.
    pub m_draws: usize,
    pub h_values: Vec<f64>,
    pub u_dagger: DVector<f64>,
    /// Observation noise covariance is `gamma_scale * I`.
    pub gamma_scale: f64,
    /// MwMC chain length per realization.
    pub n_steps: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Also run pooled MwMC chains and compare them to the mixture moments.
    pub run_mwmc: bool,
    /// Also measure the quadrature Hellinger distance between the mixture
    /// and the closed-form averaged posterior (two-dimensional grids).
    pub compute_hellinger: bool,
}

impl AveragedExperimentConfig {
    /// Paper-fidelity defaults: `d = m = 2`, `M = 16`, `Gamma = 1e-4 I`,
    /// `u_dagger = (1, 2)`, `h` in inverse powers of two.
    pub fn paper_default(seed: u64) -> Self {
        Self {
            d: 2,
            m_dim: 2,
            m_draws: 16,
            h_values: (1..=6).map(|k| 0.5f64.powi(k)).collect(),
            u_dagger: DVector::from_vec(vec![1.0, 2.0]),
            gamma_scale: 1e-4,
            n_steps: PAPER_CHAIN_LENGTH,
            replicates: DEFAULT_REPLICATES,
            seed,
            run_mwmc: false,
            compute_hellinger: false,
        }
    }

    pub fn ci_default(seed: u64) -> Self {
        Self {
            n_steps: CI_CHAIN_LENGTH,
            ..Self::paper_default(seed)
        }
    }
}

/// One mixture-vs-closed-form comparison.
#[derive(Debug, Clone)]
pub struct MixtureRecord {
    pub h: f64,
    pub replicate: usize,
    pub mean_error: f64,
    pub cov_error: f64,
    pub hellinger: Option<f64>,
}

/// Output of the averaged study: optional MwMC sweep rows plus the mixture
/// records.
#[derive(Debug, Clone)]
pub struct AveragedOutput {
    pub sweep_results: Vec<SweepResult>,
    pub mixture_records: Vec<MixtureRecord>,
}

/// Runs the averaged study. Per replicate, one set of `M` noise draws is
/// frozen and reused across the whole `h` grid, which keeps the observed
/// convergence rates free of resampling noise.
pub fn run_averaged_experiment(config: &AveragedExperimentConfig) -> Result<AveragedOutput> {
    if config.h_values.is_empty() {
        return Err(Error::InsufficientData(
            "averaged study needs h values".into(),
        ));
    }
    if config.m_draws == 0 {
        return Err(Error::InsufficientData("averaged study needs M >= 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..config.h_values.len())
        .flat_map(|hi| (0..config.replicates).map(move |r| (hi, r)))
        .collect();

    let outputs: Vec<(Vec<SweepResult>, MixtureRecord)> = jobs
        .par_iter()
        .map(|&(hi, replicate)| -> Result<(Vec<SweepResult>, MixtureRecord)> {
            let h = config.h_values[hi];
            let mut problem_rng = SeededRng::new(
                config.seed,
                derived_stream(0, &[STREAM_PROBLEM, replicate as u64]),
            );
            let pieces = draw_pieces(config.d, config.m_dim, &mut problem_rng);
            let spec = ProblemSpec {
                d: config.d,
                m_dim: config.m_dim,
                h,
                sigma: config.gamma_scale.sqrt(),
                u_dagger: config.u_dagger.clone(),
            };
            let problem = assemble_problem(&pieces, &spec)?;
            let map = problem.forward_map();

            // The frozen noise set of this replicate, independent of h.
            let mut xi_rng = SeededRng::new(
                config.seed,
                derived_stream(0, &[STREAM_XI, replicate as u64]),
            );
            let xis: Vec<DVector<f64>> = (0..config.m_draws)
                .map(|_| map.draw_noise(&mut xi_rng))
                .collect();

            let averaged = averaged_posterior(&problem)?;
            let (mix_mean, mix_cov) = mixture_moments(&problem, &xis)?;
            let hellinger = if config.compute_hellinger {
                let grid = GridSpec::around(&averaged, 10.0, 401)?;
                let mixture = mixture_density_fn(&problem, &xis)?;
                Some(hellinger_quadrature(
                    mixture,
                    |x| averaged.density(&DVector::from_row_slice(x)).unwrap(),
                    &grid,
                )?)
            } else {
                None
            };
            let record = MixtureRecord {
                h,
                replicate,
                mean_error: (&mix_mean - averaged.mean()).norm(),
                cov_error: (&mix_cov - averaged.covariance()).norm(),
                hellinger,
            };

            let mut sweep_rows = Vec::new();
            if config.run_mwmc {
                let prior = problem.base().prior().clone();
                let obs = Observation::new(
                    problem.base().y().clone(),
                    problem.base().gamma().clone(),
                )?;
                let frozen: Vec<_> = xis.iter().map(|xi| map.freeze_with(xi)).collect();
                let refs: Vec<&dyn ForwardModel> =
                    frozen.iter().map(|f| f as &dyn ForwardModel).collect();
                let proposal = crate::analytic::sample_posterior(&problem, &xis[0])?
                    .covariance()
                    .clone();
                let chain_config = ChainConfig::new(config.n_steps, proposal, config.seed)
                    .with_stream(derived_stream(
                        0,
                        &[STREAM_CHAIN, Method::Mwmc.stream_tag(), replicate as u64],
                    ));
                let start = Instant::now();
                let sample = mwmc_frozen(&obs, &refs, &prior, &chain_config)?;
                let mixture_measure = GaussianMeasure::new(mix_mean.clone(), mix_cov.clone())?;
                let err = moment_error(sample.pooled_states(), &mixture_measure, "mixture")?;
                sweep_rows.push(SweepResult {
                    method: Method::Mwmc,
                    sweep_variable: SweepVariable::H,
                    sweep_value: h,
                    replicate,
                    acceptance_ratio: sample.acceptance_ratio(),
                    mean_error: err.mean_error,
                    cov_error: err.cov_error,
                    forward_evals: sample.forward_evals(),
                    wall_time_seconds: start.elapsed().as_secs_f64(),
                });
            }
            Ok((sweep_rows, record))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sweep_results = Vec::new();
    let mut mixture_records = Vec::new();
    for (rows, record) in outputs {
        sweep_results.extend(rows);
        mixture_records.push(record);
    }
    sort_rows(&mut sweep_results);
    mixture_records.sort_by(|a, b| {
        a.h.partial_cmp(&b.h)
            .expect("finite")
            .then(a.replicate.cmp(&b.replicate))
    });
    Ok(AveragedOutput {
        sweep_results,
        mixture_records,
    })
}

/// A two-dimensional density grid comparing the Gaussian-mixture
/// approximation with the closed-form averaged posterior.
#[derive(Debug, Clone)]
pub struct ContourGrid {
    pub h: f64,
    pub nodes_per_axis: usize,
    /// Rows `(x1, x2, density_mixture, density_closed_form)` in
    /// row-major grid order.
    pub points: Vec<[f64; 4]>,
}

/// Evaluates the mixture and closed-form averaged densities of the
/// replicate-0 problem on a regular grid spanning eight standard
/// deviations of the averaged posterior.
pub fn averaged_contour_grid(
    config: &AveragedExperimentConfig,
    h: f64,
    m_contour: usize,
    nodes_per_axis: usize,
) -> Result<ContourGrid> {
    if m_contour == 0 {
        return Err(Error::InsufficientData("contour grid needs M >= 1".into()));
    }
    let mut problem_rng =
        SeededRng::new(config.seed, derived_stream(0, &[STREAM_PROBLEM, 0]));
    let pieces = draw_pieces(config.d, config.m_dim, &mut problem_rng);
    let spec = ProblemSpec {
        d: config.d,
        m_dim: config.m_dim,
        h,
        sigma: config.gamma_scale.sqrt(),
        u_dagger: config.u_dagger.clone(),
    };
    let problem = assemble_problem(&pieces, &spec)?;
    let map = problem.forward_map();
    let mut xi_rng = SeededRng::new(config.seed, derived_stream(0, &[STREAM_XI, 0]));
    let xis: Vec<DVector<f64>> = (0..m_contour).map(|_| map.draw_noise(&mut xi_rng)).collect();

    let averaged = averaged_posterior(&problem)?;
    let mixture = mixture_density_fn(&problem, &xis)?;
    let grid = GridSpec::around(&averaged, 8.0, nodes_per_axis)?;
    let mut points = Vec::with_capacity(nodes_per_axis * nodes_per_axis);
    grid.for_each_node(|x, _| {
        let closed = averaged.density(&DVector::from_row_slice(x)).unwrap();
        points.push([x[0], x[1], mixture(x), closed]);
    });
    Ok(ContourGrid {
        h,
        nodes_per_axis,
        points,
    })
}

/// Which measure pair a Hellinger record compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TheoremMeasure {
    /// Marginal posterior vs its Monte Carlo density.
    Marginal,
    /// Averaged posterior vs the Gaussian mixture.
    Averaged,
}

impl TheoremMeasure {
    pub fn label(&self) -> &'static str {
        match self {
            TheoremMeasure::Marginal => "marginal",
            TheoremMeasure::Averaged => "averaged",
        }
    }
}

/// The swept axis of a Hellinger record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TheoremAxis {
    H,
    M,
}

impl TheoremAxis {
    pub fn label(&self) -> &'static str {
        match self {
            TheoremAxis::H => "h",
            TheoremAxis::M => "M",
        }
    }
}

/// One quadrature Hellinger measurement.
#[derive(Debug, Clone)]
pub struct HellingerRecord {
    pub measure: TheoremMeasure,
    pub axis: TheoremAxis,
    pub sweep_value: f64,
    pub replicate: usize,
    pub hellinger: f64,
}

/// A fitted root-mean-square Hellinger rate.
#[derive(Debug, Clone)]
pub struct TheoremFit {
    pub measure: TheoremMeasure,
    pub axis: TheoremAxis,
    pub fit: RateFit,
}

/// Output of the Hellinger scaling check.
#[derive(Debug, Clone)]
pub struct TheoremCheckOutput {
    pub records: Vec<HellingerRecord>,
    pub fits: Vec<TheoremFit>,
}

impl TheoremCheckOutput {
    pub fn fit(&self, measure: TheoremMeasure, axis: TheoremAxis) -> Option<&RateFit> {
        self.fits
            .iter()
            .find(|f| f.measure == measure && f.axis == axis)
            .map(|f| &f.fit)
    }
}

/// Configuration of the Hellinger scaling check (one-dimensional problem,
/// quadrature everywhere).
#[derive(Debug, Clone)]
pub struct TheoremCheckConfig {
    /// `M` held fixed while sweeping `h`.
    pub fixed_m: usize,
    /// `h` held fixed while sweeping `M`.
    pub fixed_h: f64,
    pub h_values: Vec<f64>,
    pub m_values: Vec<usize>,
    pub replicates: usize,
    /// Observation noise scale. The default 0.5 keeps the largest grid
    /// points inside the pre-asymptotic regime where the Hellinger
    /// distance is far from saturation.
    pub sigma: f64,
    pub u_dagger: f64,
    pub seed: u64,
    /// Quadrature nodes per axis.
    pub nodes: usize,
    pub sweep_h: bool,
    pub sweep_m: bool,
}

impl TheoremCheckConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            fixed_m: 16,
            fixed_h: 0.25,
            h_values: (1..=6).map(|k| 0.5f64.powi(k)).collect(),
            m_values: (0..9).map(|k| 1usize << k).collect(),
            replicates: 32,
            sigma: 0.5,
            u_dagger: 1.0,
            seed,
            nodes: 801,
            sweep_h: true,
            sweep_m: true,
        }
    }
}

/// Measures the RMS quadrature Hellinger distance between the closed-form
/// marginal/averaged posteriors and their Monte Carlo approximations,
/// sweeping `h` at fixed `M` and `M` at fixed `h`.
///
/// The problem is the scalar linear model with `A = 1`, `P = 1`, `Q = 1`
/// and one observation drawn from the experiment seed; replicates vary
/// only the noise-draw sets, matching the expectation the rates refer to.
/// Each replicate reuses one master draw set: sweeping `M` takes prefixes,
/// sweeping `h` reuses the first `fixed_m` draws, so rates are measured
/// with common random numbers.
pub fn run_theorem_check(config: &TheoremCheckConfig) -> Result<TheoremCheckOutput> {
    if config.replicates == 0 {
        return Err(Error::InsufficientData(
            "theorem check needs replicates >= 1".into(),
        ));
    }
    let max_m = config
        .m_values
        .iter()
        .copied()
        .max()
        .unwrap_or(0)
        .max(config.fixed_m);
    if max_m == 0 {
        return Err(Error::InsufficientData("theorem check needs M >= 1".into()));
    }

    let mut data_rng = SeededRng::new(config.seed, derived_stream(0, &[STREAM_PROBLEM]));
    let beta0 = data_rng.standard_normal();
    let problem_at = |h: f64| -> Result<RandomizedLinearGaussianProblem> {
        let y = config.u_dagger + config.sigma * beta0;
        let base = LinearGaussianProblem::new(
            DMatrix::from_vec(1, 1, vec![1.0]),
            DMatrix::from_vec(
                1,
                1,
                vec![(config.sigma * config.sigma).max(f64::MIN_POSITIVE)],
            ),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DVector::from_vec(vec![y]),
        )?;
        RandomizedLinearGaussianProblem::new(
            base,
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            h,
        )
    };

    // (axis, sweep value, M, h) jobs.
    let mut jobs: Vec<(TheoremAxis, f64, usize, f64)> = Vec::new();
    if config.sweep_h {
        for &h in &config.h_values {
            jobs.push((TheoremAxis::H, h, config.fixed_m, h));
        }
    }
    if config.sweep_m {
        for &m in &config.m_values {
            jobs.push((TheoremAxis::M, m as f64, m, config.fixed_h));
        }
    }

    let per_job: Vec<Vec<HellingerRecord>> = jobs
        .par_iter()
        .map(|&(axis, sweep_value, m, h)| -> Result<Vec<HellingerRecord>> {
            let problem = problem_at(h)?;
            let map = problem.forward_map();
            let marginal = marginal_posterior(&problem)?;
            let averaged = averaged_posterior(&problem)?;
            let prior = problem.base().prior();
            let a_h = problem.a_h()[(0, 0)];
            let y = problem.base().y()[0];
            let gamma = problem.base().gamma()[(0, 0)];

            let mut records = Vec::with_capacity(2 * config.replicates);
            for replicate in 0..config.replicates {
                let mut xi_rng = SeededRng::new(
                    config.seed,
                    derived_stream(0, &[STREAM_XI, replicate as u64]),
                );
                let xis: Vec<DVector<f64>> =
                    (0..max_m).map(|_| map.draw_noise(&mut xi_rng)).collect();
                let xi_set = &xis[..m];

                // Averaged posterior vs the Gaussian mixture.
                let grid = GridSpec::around(&averaged, 10.0, config.nodes)?;
                let mixture = mixture_density_fn(&problem, xi_set)?;
                let d_avg = hellinger_quadrature(
                    &mixture,
                    |x| averaged.density(&DVector::from_row_slice(x)).unwrap(),
                    &grid,
                )?;
                records.push(HellingerRecord {
                    measure: TheoremMeasure::Averaged,
                    axis,
                    sweep_value,
                    replicate,
                    hellinger: d_avg,
                });

                // Marginal posterior vs the Monte Carlo marginal density
                // exp^M(-Phi_h(u)) / Z_h^M, normalized on the grid.
                let grid_m = GridSpec::around(&marginal, 10.0, config.nodes)?;
                let numerator = |u: f64| {
                    let logs: Vec<f64> = xi_set
                        .iter()
                        .map(|xi| {
                            let r = y - a_h * u - h * xi[0];
                            -0.5 * r * r / gamma
                        })
                        .collect();
                    crate::potential::log_mean_exp(&logs).exp()
                };
                let mut z = 0.0;
                grid_m.for_each_node(|x, w| {
                    z += w
                        * numerator(x[0])
                        * prior.density(&DVector::from_row_slice(x)).unwrap();
                });
                let d_marg = hellinger_quadrature(
                    |x| {
                        numerator(x[0]) * prior.density(&DVector::from_row_slice(x)).unwrap()
                            / z
                    },
                    |x| marginal.density(&DVector::from_row_slice(x)).unwrap(),
                    &grid_m,
                )?;
                records.push(HellingerRecord {
                    measure: TheoremMeasure::Marginal,
                    axis,
                    sweep_value,
                    replicate,
                    hellinger: d_marg,
                });
            }
            Ok(records)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records: Vec<HellingerRecord> = per_job.into_iter().flatten().collect();
    records.sort_by(|a, b| {
        (a.measure.label(), a.axis.label())
            .cmp(&(b.measure.label(), b.axis.label()))
            .then(a.sweep_value.partial_cmp(&b.sweep_value).expect("finite"))
            .then(a.replicate.cmp(&b.replicate))
    });

    let mut fits = Vec::new();
    for measure in [TheoremMeasure::Marginal, TheoremMeasure::Averaged] {
        for axis in [TheoremAxis::H, TheoremAxis::M] {
            if let Some(fit) = rms_fit(&records, measure, axis)? {
                fits.push(TheoremFit { measure, axis, fit });
            }
        }
    }
    Ok(TheoremCheckOutput { records, fits })
}

/// Root-mean-square Hellinger per sweep value, fitted log-log. Sweep
/// values with vanishing RMS (h = 0 rows) are excluded; fewer than three
/// usable points yield no fit.
fn rms_fit(
    records: &[HellingerRecord],
    measure: TheoremMeasure,
    axis: TheoremAxis,
) -> Result<Option<RateFit>> {
    let mut by_value: Vec<(f64, Vec<f64>)> = Vec::new();
    for r in records {
        if r.measure != measure || r.axis != axis {
            continue;
        }
        match by_value.iter_mut().find(|(v, _)| *v == r.sweep_value) {
            Some((_, acc)) => acc.push(r.hellinger),
            None => by_value.push((r.sweep_value, vec![r.hellinger])),
        }
    }
    let pairs: Vec<(f64, f64)> = by_value
        .into_iter()
        .map(|(v, hs)| {
            let rms = (hs.iter().map(|h| h * h).sum::<f64>() / hs.len() as f64).sqrt();
            (v, rms)
        })
        .filter(|&(v, rms)| v > 0.0 && rms > 0.0)
        .collect();
    if pairs.len() < 3 {
        return Ok(None);
    }
    fit_rate(&pairs).map(Some)
}
