//! Metropolis-type samplers for randomized forward maps.
//!
//! Four algorithms share one proposal/accept kernel:
//!
//! - [`rwmh`]: random walk Metropolis-Hastings against an explicit log
//!   target;
//! - [`pmmh`]: pseudo-marginal Metropolis-Hastings; the likelihood is
//!   replaced by a fresh `M`-draw Monte Carlo estimate at the proposal and
//!   the estimate at the current state is recycled from the step at which
//!   that state was accepted, so the chain's marginal targets the marginal
//!   posterior exactly;
//! - [`mcwm`]: Monte Carlo within Metropolis; both estimates are redrawn
//!   every step (twice the cost), which trades exactness for robustness;
//! - [`mwmc`]: Metropolis within Monte Carlo; one independent RWMH chain
//!   per frozen forward-map realization, pooled into a sample of the Monte
//!   Carlo averaged posterior.
//!
//! Acceptance ratios are computed in log space throughout. The prior
//! quadratic terms use `(u - m0, C0^{-1}(u - m0))`, which reduces to the
//! usual expression for a centered prior.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, RandomizedForwardModel};
use crate::gaussian::{cholesky, GaussianMeasure};
use crate::potential::{mc_likelihood, potential_exact, Observation};
use crate::rng::{derived_stream, SeededRng};

// Stream tags; disjoint sub-streams per chain.
const STREAM_INIT: u64 = 1;
const STREAM_PROPOSAL: u64 = 2;
const STREAM_ACCEPT: u64 = 3;
const STREAM_EST_PROPOSED: u64 = 4;
const STREAM_EST_CURRENT: u64 = 5;
const STREAM_FREEZE: u64 = 6;
const STREAM_SUBCHAIN: u64 = 7;

/// Where a chain starts.
#[derive(Debug, Clone)]
pub enum InitialState {
    /// Draw `u^(0)` from the prior.
    PriorDraw,
    /// Start from the given point.
    Explicit(DVector<f64>),
}

/// Configuration shared by all samplers.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    /// Number of retained states `N`.
    pub n_steps: usize,
    /// SPD covariance of the Gaussian random-walk proposal.
    pub proposal_covariance: DMatrix<f64>,
    pub initial_state: InitialState,
    pub seed: u64,
    /// Base stream id of the chain; sub-streams are derived from it.
    pub stream: u64,
    /// Inner Monte Carlo sample size `M` (ignored by RWMH).
    pub inner_m: usize,
    /// Leading iterations to discard. Defaults to 0: the reference
    /// experiments keep every state.
    pub burn_in: usize,
}

impl ChainConfig {
    pub fn new(n_steps: usize, proposal_covariance: DMatrix<f64>, seed: u64) -> Self {
        Self {
            n_steps,
            proposal_covariance,
            initial_state: InitialState::PriorDraw,
            seed,
            stream: 0,
            inner_m: 1,
            burn_in: 0,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn with_inner_m(mut self, inner_m: usize) -> Self {
        self.inner_m = inner_m;
        self
    }

    pub fn with_initial_state(mut self, initial_state: InitialState) -> Self {
        self.initial_state = initial_state;
        self
    }

    pub fn with_burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in;
        self
    }
}

/// An MCMC chain: retained states (one per row), per-step accept flags and
/// bookkeeping counters.
#[derive(Debug, Clone)]
pub struct Chain {
    states: DMatrix<f64>,
    accepted: Vec<bool>,
    acceptance_ratio: f64,
    seed: u64,
    stream: u64,
    forward_evals: u64,
    underflow_events: u64,
    estimator_trace: Option<Vec<f64>>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    /// All retained states, one per row.
    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn state(&self, i: usize) -> DVector<f64> {
        self.states.row(i).transpose()
    }

    pub fn accepted(&self) -> &[bool] {
        &self.accepted
    }

    /// Fraction of accepted proposals among the retained steps.
    pub fn acceptance_ratio(&self) -> f64 {
        self.acceptance_ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Forward-map evaluations consumed, including the one-time evaluation
    /// of the initial state where the algorithm needs it.
    pub fn forward_evals(&self) -> u64 {
        self.forward_evals
    }

    /// Steps at which both likelihood estimates were zero and the proposal
    /// was therefore auto-rejected.
    pub fn underflow_events(&self) -> u64 {
        self.underflow_events
    }

    /// For estimator-driven samplers: the log likelihood estimate attached
    /// to the current state after each retained step. For PMMH this value
    /// stays constant between consecutive rejections.
    pub fn estimator_trace(&self) -> Option<&[f64]> {
        self.estimator_trace.as_deref()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum EvalRole {
    Proposed,
    Current,
}

struct Evaluation {
    log_total: f64,
    log_estimator: f64,
    forward_evals: u64,
}

/// The shared proposal/accept kernel.
///
/// `refresh_current` re-evaluates the current state every step (MCwM);
/// otherwise the current value is recycled from the accepting step (RWMH,
/// PMMH).
fn run_metropolis<E>(
    prior: &GaussianMeasure,
    config: &ChainConfig,
    refresh_current: bool,
    track_estimator: bool,
    mut eval: E,
) -> Result<Chain>
where
    E: FnMut(&DVector<f64>, u64, EvalRole) -> Result<Evaluation>,
{
    if config.n_steps == 0 {
        return Err(Error::InsufficientData("chains need n_steps >= 1".into()));
    }
    let d = prior.dim();
    if config.proposal_covariance.nrows() != d || config.proposal_covariance.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: config.proposal_covariance.nrows(),
        });
    }
    let proposal_factor = cholesky(&config.proposal_covariance)?;

    let base = SeededRng::new(config.seed, config.stream);
    let mut rng_init = base.derive(&[STREAM_INIT]);
    let mut rng_proposal = base.derive(&[STREAM_PROPOSAL]);
    let mut rng_accept = base.derive(&[STREAM_ACCEPT]);

    let mut current = match &config.initial_state {
        InitialState::PriorDraw => prior.sample(&mut rng_init),
        InitialState::Explicit(u0) => {
            if u0.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: u0.len(),
                });
            }
            u0.clone()
        }
    };

    let mut forward_evals = 0u64;
    let mut underflow_events = 0u64;
    let mut log_current = f64::NAN;
    let mut log_estimator_current = f64::NAN;
    if !refresh_current {
        let initial = eval(&current, 0, EvalRole::Current)?;
        forward_evals += initial.forward_evals;
        log_current = initial.log_total;
        log_estimator_current = initial.log_estimator;
    }

    let total = config.burn_in + config.n_steps;
    let mut states = DMatrix::zeros(config.n_steps, d);
    let mut accepted = Vec::with_capacity(config.n_steps);
    let mut trace = track_estimator.then(|| Vec::with_capacity(config.n_steps));
    let mut accepted_count = 0usize;

    for i in 1..=total {
        let step = proposal_factor.transform(&rng_proposal.standard_normal_vector(d));
        let proposed = &current + step;
        let prop_eval = eval(&proposed, i as u64, EvalRole::Proposed)?;
        forward_evals += prop_eval.forward_evals;
        if refresh_current {
            let cur_eval = eval(&current, i as u64, EvalRole::Current)?;
            forward_evals += cur_eval.forward_evals;
            log_current = cur_eval.log_total;
            log_estimator_current = cur_eval.log_estimator;
        }

        let log_alpha = if prop_eval.log_total == f64::NEG_INFINITY
            && log_current == f64::NEG_INFINITY
        {
            // Both estimates vanished: reject and record the event instead
            // of resolving 0/0.
            underflow_events += 1;
            f64::NEG_INFINITY
        } else if log_current == f64::NEG_INFINITY {
            f64::INFINITY
        } else {
            prop_eval.log_total - log_current
        };

        // The coin is drawn unconditionally so the accept stream advances
        // one draw per step regardless of the branch taken.
        let coin = rng_accept.uniform();
        let accept = log_alpha >= 0.0 || coin.ln() < log_alpha;
        if accept {
            current = proposed;
            log_current = prop_eval.log_total;
            log_estimator_current = prop_eval.log_estimator;
        }

        if i > config.burn_in {
            let k = i - config.burn_in - 1;
            states.row_mut(k).copy_from(&current.transpose());
            accepted.push(accept);
            if accept {
                accepted_count += 1;
            }
            if let Some(t) = trace.as_mut() {
                t.push(log_estimator_current);
            }
        }
    }

    Ok(Chain {
        states,
        accepted,
        acceptance_ratio: accepted_count as f64 / config.n_steps as f64,
        seed: config.seed,
        stream: config.stream,
        forward_evals,
        underflow_events,
        estimator_trace: trace,
    })
}

/// Log of the prior quadratic term `-(1/2)(u - m0, C0^{-1}(u - m0))`.
fn prior_quadratic<'a>(prior: &'a GaussianMeasure) -> impl Fn(&DVector<f64>) -> f64 + 'a {
    move |u: &DVector<f64>| {
        -0.5 * prior
            .cholesky()
            .solve_lower(&(u - prior.mean()))
            .norm_squared()
    }
}

/// Random walk Metropolis-Hastings against `exp(log_unnormalized_target)`.
///
/// The target is the full unnormalized log posterior density (potential and
/// prior terms together); the chain leaves the corresponding normalized
/// measure invariant.
pub fn rwmh<T>(
    mut log_unnormalized_target: T,
    prior: &GaussianMeasure,
    config: &ChainConfig,
) -> Result<Chain>
where
    T: FnMut(&DVector<f64>) -> f64,
{
    run_metropolis(prior, config, false, false, |u, _, _| {
        Ok(Evaluation {
            log_total: log_unnormalized_target(u),
            log_estimator: f64::NAN,
            forward_evals: 1,
        })
    })
}

fn check_sampler_dims<M>(obs: &Observation, map: &M, prior: &GaussianMeasure) -> Result<()>
where
    M: RandomizedForwardModel + ?Sized,
{
    if map.input_dim() != prior.dim() {
        return Err(Error::DimensionMismatch {
            expected: prior.dim(),
            actual: map.input_dim(),
        });
    }
    if map.output_dim() != obs.dim() {
        return Err(Error::DimensionMismatch {
            expected: obs.dim(),
            actual: map.output_dim(),
        });
    }
    Ok(())
}

/// Pseudo-marginal Metropolis-Hastings.
///
/// At each step a fresh `M`-draw likelihood estimate is computed at the
/// proposal only; the estimate at the current state is recycled. Draw `j`
/// of iteration `i` consumes the stream derived from (chain stream,
/// proposed-estimator tag, `i`, `j`).
pub fn pmmh<M>(
    obs: &Observation,
    map: &M,
    prior: &GaussianMeasure,
    config: &ChainConfig,
) -> Result<Chain>
where
    M: RandomizedForwardModel + ?Sized,
{
    check_sampler_dims(obs, map, prior)?;
    if config.inner_m == 0 {
        return Err(Error::InsufficientData("PMMH needs inner_m >= 1".into()));
    }
    let quad = prior_quadratic(prior);
    let base = SeededRng::new(config.seed, config.stream);
    run_metropolis(prior, config, false, true, |u, iteration, _| {
        let rng = base.derive(&[STREAM_EST_PROPOSED, iteration]);
        let batch = mc_likelihood(obs, map, u, config.inner_m, &rng)?;
        let log_estimator = batch.log_mean();
        Ok(Evaluation {
            log_total: log_estimator + quad(u),
            log_estimator,
            forward_evals: config.inner_m as u64,
        })
    })
}

/// Monte Carlo within Metropolis.
///
/// Both likelihood estimates are redrawn every step (2M forward
/// evaluations per step). The targeted measure is a perturbation of the
/// marginal posterior that tightens as `M` grows.
pub fn mcwm<M>(
    obs: &Observation,
    map: &M,
    prior: &GaussianMeasure,
    config: &ChainConfig,
) -> Result<Chain>
where
    M: RandomizedForwardModel + ?Sized,
{
    check_sampler_dims(obs, map, prior)?;
    if config.inner_m == 0 {
        return Err(Error::InsufficientData("MCwM needs inner_m >= 1".into()));
    }
    let quad = prior_quadratic(prior);
    let base = SeededRng::new(config.seed, config.stream);
    run_metropolis(prior, config, true, true, |u, iteration, role| {
        let tag = match role {
            EvalRole::Proposed => STREAM_EST_PROPOSED,
            EvalRole::Current => STREAM_EST_CURRENT,
        };
        let rng = base.derive(&[tag, iteration]);
        let batch = mc_likelihood(obs, map, u, config.inner_m, &rng)?;
        let log_estimator = batch.log_mean();
        Ok(Evaluation {
            log_total: log_estimator + quad(u),
            log_estimator,
            forward_evals: config.inner_m as u64,
        })
    })
}

/// The pooled output of Metropolis within Monte Carlo.
#[derive(Debug, Clone)]
pub struct MwmcSample {
    sub_chains: Vec<Chain>,
    pooled: DMatrix<f64>,
}

impl MwmcSample {
    /// The independent per-realization chains, in realization order.
    pub fn sub_chains(&self) -> &[Chain] {
        &self.sub_chains
    }

    /// All `N * M` states, sub-chains concatenated in realization order.
    pub fn pooled_states(&self) -> &DMatrix<f64> {
        &self.pooled
    }

    pub fn len(&self) -> usize {
        self.pooled.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.pooled.nrows() == 0
    }

    /// Total forward evaluations across sub-chains.
    pub fn forward_evals(&self) -> u64 {
        self.sub_chains.iter().map(Chain::forward_evals).sum()
    }

    /// Mean acceptance ratio across sub-chains.
    pub fn acceptance_ratio(&self) -> f64 {
        self.sub_chains
            .iter()
            .map(Chain::acceptance_ratio)
            .sum::<f64>()
            / self.sub_chains.len() as f64
    }
}

/// Metropolis within Monte Carlo: freezes `m_realizations` forward maps and
/// runs one RWMH chain against each sample posterior, pooling all states.
pub fn mwmc<M>(
    obs: &Observation,
    map: &M,
    prior: &GaussianMeasure,
    config: &ChainConfig,
    m_realizations: usize,
) -> Result<MwmcSample>
where
    M: RandomizedForwardModel + ?Sized,
{
    check_sampler_dims(obs, map, prior)?;
    if m_realizations == 0 {
        return Err(Error::InsufficientData("MwMC needs M >= 1".into()));
    }
    let base = SeededRng::new(config.seed, config.stream);
    let frozen: Vec<Box<dyn ForwardModel>> = (0..m_realizations)
        .map(|i| {
            let mut rng = base.derive(&[STREAM_FREEZE, i as u64]);
            map.freeze(&mut rng)
        })
        .collect();
    let refs: Vec<&dyn ForwardModel> = frozen.iter().map(AsRef::as_ref).collect();
    mwmc_frozen(obs, &refs, prior, config)
}

/// Runs one RWMH chain per frozen forward realization and pools them.
///
/// Sub-chain `i` owns the stream derived from (chain stream, sub-chain tag,
/// `i`); chains run in parallel and are pooled deterministically in
/// realization order. The shared initial state is drawn once from the
/// prior unless the configuration pins it.
pub fn mwmc_frozen(
    obs: &Observation,
    realizations: &[&dyn ForwardModel],
    prior: &GaussianMeasure,
    config: &ChainConfig,
) -> Result<MwmcSample> {
    if realizations.is_empty() {
        return Err(Error::InsufficientData("MwMC needs M >= 1".into()));
    }
    let base = SeededRng::new(config.seed, config.stream);
    let initial = match &config.initial_state {
        InitialState::PriorDraw => prior.sample(&mut base.derive(&[STREAM_INIT])),
        InitialState::Explicit(u0) => u0.clone(),
    };
    let quad = prior_quadratic(prior);

    let sub_chains: Vec<Chain> = realizations
        .par_iter()
        .enumerate()
        .map(|(i, frozen)| {
            let sub_config = ChainConfig {
                stream: derived_stream(config.stream, &[STREAM_SUBCHAIN, i as u64]),
                initial_state: InitialState::Explicit(initial.clone()),
                ..config.clone()
            };
            rwmh(
                |u| {
                    let phi = potential_exact(obs, &frozen.apply(u))
                        .expect("dimensions were validated");
                    -phi + quad(u)
                },
                prior,
                &sub_config,
            )
        })
        .collect::<Result<_>>()?;

    let n = config.n_steps;
    let d = prior.dim();
    let mut pooled = DMatrix::zeros(n * sub_chains.len(), d);
    for (i, chain) in sub_chains.iter().enumerate() {
        pooled.rows_mut(i * n, n).copy_from(chain.states());
    }
    Ok(MwmcSample { sub_chains, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{
        exact_posterior, marginal_posterior, mixture_moments, LinearGaussianProblem,
        RandomizedLinearGaussianProblem,
    };
    use crate::diagnostics::{
        covariance_frobenius_standard_error, empirical_moments, mean_standard_errors,
    };

    /// The standing 3-d test problem: A uniform in (-1, 1), A_h = A + hI,
    /// Q = I, y = A u_dagger + noise, prior N(0, I).
    fn linear_problem(seed: u64, h: f64, sigma: f64) -> RandomizedLinearGaussianProblem {
        let mut rng = SeededRng::new(seed, 0);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.uniform_in(-1.0, 1.0));
        let u_dagger = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let y = &a * &u_dagger + rng.standard_normal_vector(3) * sigma;
        let base = LinearGaussianProblem::new(
            a,
            DMatrix::identity(3, 3) * sigma * sigma,
            DVector::zeros(3),
            DMatrix::identity(3, 3),
            y,
        )
        .unwrap();
        RandomizedLinearGaussianProblem::new(
            base,
            DMatrix::identity(3, 3),
            DMatrix::identity(3, 3),
            h,
        )
        .unwrap()
    }

    fn observation(p: &RandomizedLinearGaussianProblem) -> Observation {
        Observation::new(p.base().y().clone(), p.base().gamma().clone()).unwrap()
    }

    fn marginal_target<'a>(
        p: &'a RandomizedLinearGaussianProblem,
        prior: &'a GaussianMeasure,
    ) -> impl Fn(&DVector<f64>) -> f64 + 'a {
        let obs_h = Observation::new(p.base().y().clone(), p.gamma_h()).unwrap();
        let a_h = p.a_h();
        let quad = prior_quadratic(prior);
        move |u: &DVector<f64>| {
            -potential_exact(&obs_h, &(&a_h * u)).unwrap() + quad(u)
        }
    }

    #[test]
    fn rwmh_recovers_prior_when_potential_vanishes() {
        let prior = GaussianMeasure::new(
            DVector::from_vec(vec![0.5, -1.0]),
            DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]),
        )
        .unwrap();
        let quad = prior_quadratic(&prior);
        let config = ChainConfig::new(1_000_000, prior.covariance().clone(), 42);
        let chain = rwmh(|u| quad(u), &prior, &config).unwrap();
        let (mean, cov) = empirical_moments(chain.states()).unwrap();
        assert!(
            (mean - prior.mean()).norm() / prior.mean().norm() < 0.02,
            "prior mean not recovered"
        );
        assert!((cov - prior.covariance()).norm() / prior.covariance().norm() < 0.02);
    }

    #[test]
    fn rwmh_flat_target_accepts_everything() {
        let prior = GaussianMeasure::standard(2);
        let config = ChainConfig::new(1000, DMatrix::identity(2, 2), 3);
        let chain = rwmh(|_| 0.0, &prior, &config).unwrap();
        assert_eq!(chain.acceptance_ratio(), 1.0);
        assert!(chain.accepted().iter().all(|&a| a));
    }

    #[test]
    fn rwmh_matches_conjugate_posterior() {
        let p = linear_problem(101, 0.0, 0.5);
        let posterior = exact_posterior(p.base()).unwrap();
        let prior = p.base().prior().clone();
        let obs = observation(&p);
        let a = p.base().a().clone();
        let quad = prior_quadratic(&prior);
        let config = ChainConfig::new(200_000, posterior.covariance().clone(), 7);
        let chain = rwmh(
            |u| -potential_exact(&obs, &(&a * u)).unwrap() + quad(u),
            &prior,
            &config,
        )
        .unwrap();
        let (mean, cov) = empirical_moments(chain.states()).unwrap();
        let se = mean_standard_errors(chain.states()).unwrap();
        assert!(
            (&mean - posterior.mean()).norm() <= 3.0 * se.norm(),
            "mean error {} vs bound {}",
            (&mean - posterior.mean()).norm(),
            3.0 * se.norm()
        );
        let cov_se = covariance_frobenius_standard_error(chain.states(), 50).unwrap();
        assert!((cov - posterior.covariance()).norm() <= 3.0 * cov_se);
    }

    #[test]
    fn chains_are_bitwise_reproducible() {
        let p = linear_problem(5, 0.25, 0.3);
        let prior = p.base().prior().clone();
        let obs = observation(&p);
        let map = p.forward_map();
        let reference = marginal_posterior(&p).unwrap();
        let config = ChainConfig::new(500, reference.covariance().clone(), 99)
            .with_stream(11)
            .with_inner_m(4);

        let c1 = pmmh(&obs, &map, &prior, &config).unwrap();
        let c2 = pmmh(&obs, &map, &prior, &config).unwrap();
        assert_eq!(c1.states().as_slice(), c2.states().as_slice());
        assert_eq!(c1.accepted(), c2.accepted());

        let m1 = mcwm(&obs, &map, &prior, &config).unwrap();
        let m2 = mcwm(&obs, &map, &prior, &config).unwrap();
        assert_eq!(m1.states().as_slice(), m2.states().as_slice());

        let w1 = mwmc(&obs, &map, &prior, &config, 3).unwrap();
        let w2 = mwmc(&obs, &map, &prior, &config, 3).unwrap();
        assert_eq!(
            w1.pooled_states().as_slice(),
            w2.pooled_states().as_slice()
        );
    }

    #[test]
    fn pmmh_and_mcwm_coincide_with_rwmh_at_h_zero() {
        let p = linear_problem(8, 0.0, 0.4);
        let prior = p.base().prior().clone();
        let obs = observation(&p);
        let map = p.forward_map();
        let reference = exact_posterior(p.base()).unwrap();
        let config = ChainConfig::new(2_000, reference.covariance().clone(), 17)
            .with_stream(2)
            .with_inner_m(4);

        let a = p.base().a().clone();
        let quad = prior_quadratic(&prior);
        let reference_chain = rwmh(
            |u| -potential_exact(&obs, &(&a * u)).unwrap() + quad(u),
            &prior,
            &config,
        )
        .unwrap();
        let pm = pmmh(&obs, &map, &prior, &config).unwrap();
        let mc = mcwm(&obs, &map, &prior, &config).unwrap();
        assert_eq!(pm.states().as_slice(), reference_chain.states().as_slice());
        assert_eq!(mc.states().as_slice(), reference_chain.states().as_slice());
    }

    #[test]
    fn pmmh_matches_marginal_posterior_for_large_m() {
        let p = linear_problem(300, 0.25, 0.3);
        let reference = marginal_posterior(&p).unwrap();
        let prior = p.base().prior().clone();
        let obs = observation(&p);
        let map = p.forward_map();
        let config = ChainConfig::new(60_000, reference.covariance().clone(), 23)
            .with_inner_m(128);
        let chain = pmmh(&obs, &map, &prior, &config).unwrap();
        let (mean, cov) = empirical_moments(chain.states()).unwrap();
        let se = mean_standard_errors(chain.states()).unwrap();
        assert!(
            (&mean - reference.mean()).norm() <= 3.0 * se.norm(),
            "mean error {} vs bound {}",
            (&mean - reference.mean()).norm(),
            3.0 * se.norm()
        );
        let cov_se = covariance_frobenius_standard_error(chain.states(), 50).unwrap();
        assert!(
            (&cov - reference.covariance()).norm() <= 3.0 * cov_se,
            "cov error {} vs bound {}",
            (&cov - reference.covariance()).norm(),
            3.0 * cov_se
        );
    }

    #[test]
    fn pmmh_single_draw_estimator_degenerates() {
        let p = linear_problem(55, 0.25, 0.1);
        let reference = marginal_posterior(&p).unwrap();
        let prior = p.base().prior().clone();
        let obs = observation(&p);
        let map = p.forward_map();
        let config = ChainConfig::new(20_000, reference.covariance().clone(), 31);

        let target = marginal_target(&p, &prior);
        let rwmh_ref = rwmh(target, &prior, &config).unwrap();
        let sticky = pmmh(&obs, &map, &prior, &config.clone().with_inner_m(1)).unwrap();
        assert!(
            sticky.acceptance_ratio() < rwmh_ref.acceptance_ratio(),
            "PMMH at M = 1 should be stickier: {} vs {}",
            sticky.acceptance_ratio(),
            rwmh_ref.acceptance_ratio()
        );
    }

    #[test]
    fn mcwm_acceptance_is_robust_in_m() {
        let p = linear_problem(55, 0.25, 0.1);
        let reference = marginal_posterior(&p).unwrap();
        let prior = p.base().prior().clone();
        let obs = observation(&p);
        let map = p.forward_map();
        let config = ChainConfig::new(10_000, reference.covariance().clone(), 37);
        let acc_small = mcwm(&obs, &map, &prior, &config.clone().with_inner_m(1))
            .unwrap()
            .acceptance_ratio();
        let acc_large = mcwm(&obs, &map, &prior, &config.clone().with_inner_m(64))
            .unwrap()
            .acceptance_ratio();
        let ratio = acc_large.max(acc_small) / acc_large.min(acc_small).max(1e-12);
        assert!(ratio < 1.5, "MCwM acceptance varied by {ratio}");
    }

    #[test]
    fn pmmh_recycles_the_current_estimate() {
        let p = linear_problem(5, 0.25, 0.2);
        let prior = p.base().prior().clone();
        let obs = observation(&p);
        let map = p.forward_map();
        let reference = marginal_posterior(&p).unwrap();
        let config =
            ChainConfig::new(3_000, reference.covariance().clone(), 71).with_inner_m(2);
        let chain = pmmh(&obs, &map, &prior, &config).unwrap();
        let trace = chain.estimator_trace().unwrap();
        let accepted = chain.accepted();
        let mut rejections = 0;
        for i in 1..trace.len() {
            if !accepted[i] {
                assert_eq!(trace[i].to_bits(), trace[i - 1].to_bits());
                rejections += 1;
            }
        }
        assert!(rejections > 0, "test needs some rejections to be meaningful");
    }

    #[test]
    fn cost_counters_are_exact() {
        let p = linear_problem(5, 0.25, 0.2);
        let prior = p.base().prior().clone();
        let obs = observation(&p);
        let map = p.forward_map();
        let reference = marginal_posterior(&p).unwrap();
        let n = 500usize;
        let m = 8usize;
        let config = ChainConfig::new(n, reference.covariance().clone(), 3).with_inner_m(m);

        // PMMH: M per step plus the one-time initial-state estimate.
        let chain = pmmh(&obs, &map, &prior, &config).unwrap();
        assert_eq!(chain.forward_evals(), (m * (n + 1)) as u64);
        // MCwM: exactly 2M per step, no setup evaluation.
        let chain = mcwm(&obs, &map, &prior, &config).unwrap();
        assert_eq!(chain.forward_evals(), (2 * m * n) as u64);
        // MwMC: one evaluation per step and sub-chain, plus one per sub-chain setup.
        let sample = mwmc(&obs, &map, &prior, &config, m).unwrap();
        assert_eq!(sample.forward_evals(), (m * (n + 1)) as u64);
    }

    #[test]
    fn all_samplers_recover_prior_for_flat_likelihood() {
        // A = 0 and y = 0 make the potential vanish identically.
        let base = LinearGaussianProblem::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
        )
        .unwrap();
        let p = RandomizedLinearGaussianProblem::new(
            base,
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            0.25,
        )
        .unwrap();
        let prior = p.base().prior().clone();
        let obs = observation(&p);
        let map = p.forward_map();
        let config = ChainConfig::new(50_000, prior.covariance().clone(), 5).with_inner_m(2);

        let quad = prior_quadratic(&prior);
        let chains: Vec<DMatrix<f64>> = vec![
            rwmh(|u| quad(u), &prior, &config).unwrap().states().clone(),
            pmmh(&obs, &map, &prior, &config).unwrap().states().clone(),
            mcwm(&obs, &map, &prior, &config).unwrap().states().clone(),
            mwmc(&obs, &map, &prior, &config, 4)
                .unwrap()
                .pooled_states()
                .clone(),
        ];
        for states in chains {
            let (mean, _) = empirical_moments(&states).unwrap();
            let se = mean_standard_errors(&states).unwrap();
            assert!(
                mean.norm() <= 3.0 * se.norm(),
                "prior mean not recovered: {} vs {}",
                mean.norm(),
                3.0 * se.norm()
            );
        }
    }

    #[test]
    fn rwmh_empirical_cdf_matches_target() {
        // Detailed balance smoke test in one dimension via the
        // Kolmogorov-Smirnov distance.
        let target_mean = 0.7;
        let target_var = 1.3;
        let prior = GaussianMeasure::standard(1);
        let config = ChainConfig::new(
            1_000_000,
            DMatrix::from_vec(1, 1, vec![target_var]),
            2024,
        );
        let chain = rwmh(
            |u| -0.5 * (u[0] - target_mean).powi(2) / target_var,
            &prior,
            &config,
        )
        .unwrap();
        let mut values: Vec<f64> = chain.states().column(0).iter().copied().collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = values.len() as f64;
        let mut ks = 0.0_f64;
        for (i, &x) in values.iter().enumerate() {
            let cdf = normal_cdf((x - target_mean) / target_var.sqrt());
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            ks = ks.max((cdf - lo).abs()).max((cdf - hi).abs());
        }
        assert!(ks < 0.01, "KS distance {ks}");
    }

    /// Abramowitz-Stegun 7.1.26 approximation, |error| < 1.5e-7.
    fn normal_cdf(z: f64) -> f64 {
        let x = z / std::f64::consts::SQRT_2;
        let t = 1.0 / (1.0 + 0.3275911 * x.abs());
        let poly = t
            * (0.254829592
                + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        let erf = 1.0 - poly * (-x * x).exp();
        let erf = if x < 0.0 { -erf } else { erf };
        0.5 * (1.0 + erf)
    }

    #[test]
    fn mwmc_single_realization_reduces_to_rwmh() {
        let p = linear_problem(9, 0.25, 0.3);
        let prior = p.base().prior().clone();
        let obs = observation(&p);
        let map = p.forward_map();
        let config = ChainConfig::new(2_000, prior.covariance().clone(), 13);
        let sample = mwmc(&obs, &map, &prior, &config, 1).unwrap();
        assert_eq!(sample.sub_chains().len(), 1);
        assert_eq!(
            sample.pooled_states().as_slice(),
            sample.sub_chains()[0].states().as_slice()
        );
        assert_eq!(sample.len(), config.n_steps);
    }

    #[test]
    fn mwmc_pooled_moments_match_the_mixture() {
        // 2-d averaged-measure setup with a forgiving noise level so the
        // chains mix well at moderate length.
        let mut rng = SeededRng::new(61, 0);
        let a = DMatrix::from_fn(2, 2, |_, _| rng.uniform_in(-1.0, 1.0));
        let u_dagger = DVector::from_vec(vec![1.0, 2.0]);
        let sigma = 0.1;
        let y = &a * &u_dagger + rng.standard_normal_vector(2) * sigma;
        let base = LinearGaussianProblem::new(
            a,
            DMatrix::identity(2, 2) * sigma * sigma,
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            y,
        )
        .unwrap();
        let p = RandomizedLinearGaussianProblem::new(
            base,
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            0.05,
        )
        .unwrap();
        let prior = p.base().prior().clone();
        let obs = observation(&p);
        let map = p.forward_map();

        let m = 8usize;
        let mut xi_rng = SeededRng::new(77, 0);
        let xis: Vec<DVector<f64>> = (0..m).map(|_| map.draw_noise(&mut xi_rng)).collect();
        let frozen: Vec<crate::forward::FrozenLinearMap> =
            xis.iter().map(|xi| map.freeze_with(xi)).collect();
        let refs: Vec<&dyn ForwardModel> =
            frozen.iter().map(|f| f as &dyn ForwardModel).collect();

        let proposal = crate::analytic::sample_posterior(&p, &xis[0])
            .unwrap()
            .covariance()
            .clone();
        let config = ChainConfig::new(40_000, proposal, 19);
        let sample = mwmc_frozen(&obs, &refs, &prior, &config).unwrap();

        let (mix_mean, mix_cov) = mixture_moments(&p, &xis).unwrap();
        let (pool_mean, pool_cov) = empirical_moments(sample.pooled_states()).unwrap();

        // Pooled mean error: each sub-chain contributes its own MC error.
        let mut se_sq = 0.0;
        for chain in sample.sub_chains() {
            se_sq += mean_standard_errors(chain.states()).unwrap().norm_squared();
        }
        let bound = 3.0 * se_sq.sqrt() / m as f64;
        assert!(
            (&pool_mean - &mix_mean).norm() <= bound,
            "pooled mean error {} vs {bound}",
            (&pool_mean - &mix_mean).norm()
        );
        let rel_cov = (pool_cov - &mix_cov).norm() / mix_cov.norm();
        assert!(rel_cov < 0.05, "pooled covariance relative error {rel_cov}");
    }

    #[test]
    fn underflow_is_counted_and_rejected() {
        // An absurd observation drives the potential to +inf, so every
        // likelihood draw is exactly zero.
        let p = linear_problem(5, 0.25, 0.2);
        let prior = p.base().prior().clone();
        let obs = Observation::new(
            DVector::from_vec(vec![1e200, 1e200, 1e200]),
            p.base().gamma().clone(),
        )
        .unwrap();
        let map = p.forward_map();
        let config = ChainConfig::new(100, prior.covariance().clone(), 3).with_inner_m(2);
        let chain = pmmh(&obs, &map, &prior, &config).unwrap();
        assert_eq!(chain.underflow_events(), 100);
        assert_eq!(chain.acceptance_ratio(), 0.0);
    }

    #[test]
    fn burn_in_discards_leading_states() {
        let prior = GaussianMeasure::standard(1);
        let config = ChainConfig::new(100, DMatrix::identity(1, 1), 5);
        let with_burn = config.clone().with_burn_in(50);
        let full = rwmh(|_| 0.0, &prior, &ChainConfig { n_steps: 150, ..config.clone() }).unwrap();
        let tail = rwmh(|_| 0.0, &prior, &with_burn).unwrap();
        assert_eq!(tail.len(), 100);
        assert_eq!(
            tail.states().as_slice(),
            full.states().rows(50, 100).into_owned().as_slice()
        );
    }
}
