//! C ABI for the randpost library.
//!
//! Everything crosses the boundary through opaque handles and status
//! codes; matrices are passed as row-major `f64` buffers. The header is
//! generated into `include/randpost.h` by cbindgen at build time.
//!
//! Ownership rules: every `*_new`/`*_run` function that yields a handle
//! transfers ownership to the caller, who must release it with the
//! matching `*_free`. Output buffers are caller-allocated; their required
//! sizes are documented per function.

use std::os::raw::c_char;

use nalgebra::{DMatrix, DVector};

use randpost::analytic::{
    averaged_posterior, exact_posterior, marginal_posterior, sample_posterior,
    LinearGaussianProblem, RandomizedLinearGaussianProblem,
};
use randpost::gaussian::{hellinger_gaussian, GaussianMeasure};
use randpost::potential::Observation;
use randpost::rng::SeededRng;
use randpost::samplers::{mcwm, pmmh, rwmh, Chain, ChainConfig};
use randpost::Error;

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NotPositiveDefinite = 4,
    NotSymmetric = 5,
    IllConditioned = 6,
    NumericalFailure = 7,
}

fn status_of(err: &Error) -> RpStatus {
    match err {
        Error::NotSymmetric { .. } => RpStatus::NotSymmetric,
        Error::NotPositiveDefinite => RpStatus::NotPositiveDefinite,
        Error::DimensionMismatch { .. } => RpStatus::DimensionMismatch,
        Error::IllConditioned(_) => RpStatus::IllConditioned,
        Error::InvalidArgument(_) | Error::InsufficientData(_) => RpStatus::InvalidArgument,
        _ => RpStatus::NumericalFailure,
    }
}

/// Static description of a status code (NUL-terminated, never freed).
#[no_mangle]
pub extern "C" fn rp_status_message(status: RpStatus) -> *const c_char {
    let message: &'static [u8] = match status {
        RpStatus::Ok => b"ok\0",
        RpStatus::NullPointer => b"null pointer argument\0",
        RpStatus::InvalidArgument => b"invalid argument\0",
        RpStatus::DimensionMismatch => b"dimension mismatch\0",
        RpStatus::NotPositiveDefinite => b"matrix not positive definite\0",
        RpStatus::NotSymmetric => b"matrix not symmetric\0",
        RpStatus::IllConditioned => b"ill-conditioned system\0",
        RpStatus::NumericalFailure => b"numerical failure\0",
    };
    message.as_ptr() as *const c_char
}

/// ABI version of this header; bumped on breaking changes.
#[no_mangle]
pub extern "C" fn rp_abi_version() -> u32 {
    1
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

unsafe fn matrix_arg(ptr: *const f64, rows: usize, cols: usize) -> Option<DMatrix<f64>> {
    unsafe { slice_arg(ptr, rows * cols) }.map(|s| DMatrix::from_row_slice(rows, cols, s))
}

unsafe fn vector_arg(ptr: *const f64, len: usize) -> Option<DVector<f64>> {
    unsafe { slice_arg(ptr, len) }.map(DVector::from_row_slice)
}

fn write_handle<T>(out: *mut *mut T, value: T) -> RpStatus {
    if out.is_null() {
        return RpStatus::NullPointer;
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    RpStatus::Ok
}

// ---------------------------------------------------------------------------
// Gaussian measures

/// Opaque Gaussian measure.
pub struct RpGaussian(GaussianMeasure);

/// Creates a Gaussian measure from a mean of length `dim` and a row-major
/// `dim x dim` covariance.
///
/// # Safety
/// `mean` must point to `dim` doubles, `covariance` to `dim * dim`
/// doubles, and `out` must be a valid location for a handle.
#[no_mangle]
pub unsafe extern "C" fn rp_gaussian_new(
    dim: usize,
    mean: *const f64,
    covariance: *const f64,
    out: *mut *mut RpGaussian,
) -> RpStatus {
    if dim == 0 {
        return RpStatus::InvalidArgument;
    }
    let (Some(mean), Some(cov)) = (unsafe { vector_arg(mean, dim) }, unsafe {
        matrix_arg(covariance, dim, dim)
    }) else {
        return RpStatus::NullPointer;
    };
    match GaussianMeasure::new(mean, cov) {
        Ok(g) => write_handle(out, RpGaussian(g)),
        Err(e) => status_of(&e),
    }
}

/// Releases a Gaussian handle. Passing NULL is a no-op.
///
/// # Safety
/// `g` must be a handle obtained from this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn rp_gaussian_free(g: *mut RpGaussian) {
    if !g.is_null() {
        drop(unsafe { Box::from_raw(g) });
    }
}

/// Dimension of the measure; 0 for NULL.
///
/// # Safety
/// `g` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn rp_gaussian_dim(g: *const RpGaussian) -> usize {
    unsafe { g.as_ref() }.map_or(0, |g| g.0.dim())
}

/// Copies the mean into `out` (length `dim`).
///
/// # Safety
/// `out` must have room for `rp_gaussian_dim(g)` doubles.
#[no_mangle]
pub unsafe extern "C" fn rp_gaussian_mean(g: *const RpGaussian, out: *mut f64) -> RpStatus {
    let Some(g) = (unsafe { g.as_ref() }) else {
        return RpStatus::NullPointer;
    };
    if out.is_null() {
        return RpStatus::NullPointer;
    }
    let target = unsafe { std::slice::from_raw_parts_mut(out, g.0.dim()) };
    target.copy_from_slice(g.0.mean().as_slice());
    RpStatus::Ok
}

/// Copies the covariance into `out` (row-major, length `dim * dim`).
///
/// # Safety
/// `out` must have room for `dim * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn rp_gaussian_covariance(
    g: *const RpGaussian,
    out: *mut f64,
) -> RpStatus {
    let Some(g) = (unsafe { g.as_ref() }) else {
        return RpStatus::NullPointer;
    };
    if out.is_null() {
        return RpStatus::NullPointer;
    }
    let d = g.0.dim();
    let target = unsafe { std::slice::from_raw_parts_mut(out, d * d) };
    for i in 0..d {
        for j in 0..d {
            target[i * d + j] = g.0.covariance()[(i, j)];
        }
    }
    RpStatus::Ok
}

/// Log Lebesgue density at `point` (length `dim`).
///
/// # Safety
/// `point` must point to `dim` doubles and `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn rp_gaussian_log_density(
    g: *const RpGaussian,
    point: *const f64,
    out: *mut f64,
) -> RpStatus {
    let Some(g) = (unsafe { g.as_ref() }) else {
        return RpStatus::NullPointer;
    };
    let Some(point) = (unsafe { vector_arg(point, g.0.dim()) }) else {
        return RpStatus::NullPointer;
    };
    if out.is_null() {
        return RpStatus::NullPointer;
    }
    match g.0.log_density(&point) {
        Ok(v) => {
            unsafe { *out = v };
            RpStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Draws `count` samples on the stream `(seed, stream)` into `out`
/// (row-major `count x dim`). Identical arguments reproduce identical
/// samples.
///
/// # Safety
/// `out` must have room for `count * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn rp_gaussian_sample(
    g: *const RpGaussian,
    seed: u64,
    stream: u64,
    count: usize,
    out: *mut f64,
) -> RpStatus {
    let Some(g) = (unsafe { g.as_ref() }) else {
        return RpStatus::NullPointer;
    };
    if out.is_null() {
        return RpStatus::NullPointer;
    }
    let d = g.0.dim();
    let target = unsafe { std::slice::from_raw_parts_mut(out, count * d) };
    let mut rng = SeededRng::new(seed, stream);
    for k in 0..count {
        let x = g.0.sample(&mut rng);
        target[k * d..(k + 1) * d].copy_from_slice(x.as_slice());
    }
    RpStatus::Ok
}

/// Hellinger distance between two Gaussians, in `[0, 1]`.
///
/// # Safety
/// `a` and `b` must be live handles, `out` a valid double location.
#[no_mangle]
pub unsafe extern "C" fn rp_hellinger_gaussian(
    a: *const RpGaussian,
    b: *const RpGaussian,
    out: *mut f64,
) -> RpStatus {
    let (Some(a), Some(b)) = (unsafe { a.as_ref() }, unsafe { b.as_ref() }) else {
        return RpStatus::NullPointer;
    };
    if out.is_null() {
        return RpStatus::NullPointer;
    }
    match hellinger_gaussian(&a.0, &b.0) {
        Ok(v) => {
            unsafe { *out = v };
            RpStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

// ---------------------------------------------------------------------------
// Linear-Gaussian problems

/// Opaque randomized linear-Gaussian inverse problem.
pub struct RpProblem(RandomizedLinearGaussianProblem);

/// Creates a randomized linear-Gaussian problem.
///
/// Shapes (all row-major): `a` and `p` are `m x d`, `q` and `gamma` are
/// `m x m`, `prior_mean` has length `d`, `prior_cov` is `d x d`, `y` has
/// length `m`. The randomized map is `u -> (A + hP) u + h xi`,
/// `xi ~ N(0, Q)`.
///
/// # Safety
/// All pointers must reference buffers of the stated sizes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn rp_problem_new(
    d: usize,
    m: usize,
    a: *const f64,
    p: *const f64,
    q: *const f64,
    h: f64,
    gamma: *const f64,
    prior_mean: *const f64,
    prior_cov: *const f64,
    y: *const f64,
    out: *mut *mut RpProblem,
) -> RpStatus {
    if d == 0 || m == 0 {
        return RpStatus::InvalidArgument;
    }
    let (Some(a), Some(p), Some(q), Some(gamma), Some(prior_mean), Some(prior_cov), Some(y)) = (
        unsafe { matrix_arg(a, m, d) },
        unsafe { matrix_arg(p, m, d) },
        unsafe { matrix_arg(q, m, m) },
        unsafe { matrix_arg(gamma, m, m) },
        unsafe { vector_arg(prior_mean, d) },
        unsafe { matrix_arg(prior_cov, d, d) },
        unsafe { vector_arg(y, m) },
    ) else {
        return RpStatus::NullPointer;
    };
    let base = match LinearGaussianProblem::new(a, gamma, prior_mean, prior_cov, y) {
        Ok(b) => b,
        Err(e) => return status_of(&e),
    };
    match RandomizedLinearGaussianProblem::new(base, p, q, h) {
        Ok(problem) => write_handle(out, RpProblem(problem)),
        Err(e) => status_of(&e),
    }
}

/// Releases a problem handle. Passing NULL is a no-op.
///
/// # Safety
/// `p` must be a handle obtained from this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn rp_problem_free(p: *mut RpProblem) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Exact posterior of the unperturbed problem.
///
/// # Safety
/// `p` must be a live problem handle and `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn rp_problem_exact_posterior(
    p: *const RpProblem,
    out: *mut *mut RpGaussian,
) -> RpStatus {
    let Some(p) = (unsafe { p.as_ref() }) else {
        return RpStatus::NullPointer;
    };
    match exact_posterior(p.0.base()) {
        Ok(g) => write_handle(out, RpGaussian(g)),
        Err(e) => status_of(&e),
    }
}

/// Marginal posterior: noise inflated to `Gamma + h^2 Q`.
///
/// # Safety
/// `p` must be a live problem handle and `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn rp_problem_marginal_posterior(
    p: *const RpProblem,
    out: *mut *mut RpGaussian,
) -> RpStatus {
    let Some(p) = (unsafe { p.as_ref() }) else {
        return RpStatus::NullPointer;
    };
    match marginal_posterior(&p.0) {
        Ok(g) => write_handle(out, RpGaussian(g)),
        Err(e) => status_of(&e),
    }
}

/// Averaged posterior: expectation of the sample posteriors.
///
/// # Safety
/// `p` must be a live problem handle and `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn rp_problem_averaged_posterior(
    p: *const RpProblem,
    out: *mut *mut RpGaussian,
) -> RpStatus {
    let Some(p) = (unsafe { p.as_ref() }) else {
        return RpStatus::NullPointer;
    };
    match averaged_posterior(&p.0) {
        Ok(g) => write_handle(out, RpGaussian(g)),
        Err(e) => status_of(&e),
    }
}

/// Sample posterior for a frozen noise realization `xi` (length `m`).
///
/// # Safety
/// `xi` must point to `m` doubles; `p` and `out` as above.
#[no_mangle]
pub unsafe extern "C" fn rp_problem_sample_posterior(
    p: *const RpProblem,
    xi: *const f64,
    out: *mut *mut RpGaussian,
) -> RpStatus {
    let Some(p) = (unsafe { p.as_ref() }) else {
        return RpStatus::NullPointer;
    };
    let Some(xi) = (unsafe { vector_arg(xi, p.0.base().observation_dim()) }) else {
        return RpStatus::NullPointer;
    };
    match sample_posterior(&p.0, &xi) {
        Ok(g) => write_handle(out, RpGaussian(g)),
        Err(e) => status_of(&e),
    }
}

// ---------------------------------------------------------------------------
// Chains

/// Sampler selector for `rp_chain_run`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpSampler {
    /// Random walk Metropolis-Hastings against the closed-form marginal
    /// posterior (reference chain; `inner_m` is ignored).
    Rwmh = 0,
    /// Pseudo-marginal Metropolis-Hastings with `inner_m` draws.
    Pmmh = 1,
    /// Monte Carlo within Metropolis with `inner_m` draws.
    Mcwm = 2,
}

/// Opaque Markov chain.
pub struct RpChain(Chain);

/// Runs a chain of `n_steps` states on the problem, using the marginal
/// posterior covariance as proposal and a prior draw as initial state.
/// Identical `(seed, stream)` reproduce identical chains.
///
/// # Safety
/// `p` must be a live problem handle and `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn rp_chain_run(
    p: *const RpProblem,
    sampler: RpSampler,
    n_steps: usize,
    inner_m: usize,
    seed: u64,
    stream: u64,
    out: *mut *mut RpChain,
) -> RpStatus {
    let Some(p) = (unsafe { p.as_ref() }) else {
        return RpStatus::NullPointer;
    };
    let problem = &p.0;
    let run = || -> Result<Chain, Error> {
        let reference = marginal_posterior(problem)?;
        let prior = problem.base().prior().clone();
        let config = ChainConfig::new(n_steps, reference.covariance().clone(), seed)
            .with_stream(stream)
            .with_inner_m(inner_m);
        match sampler {
            RpSampler::Rwmh => {
                let obs_h = Observation::new(problem.base().y().clone(), problem.gamma_h())?;
                let a_h = problem.a_h();
                let prior_chol = prior.cholesky().clone();
                let prior_mean = prior.mean().clone();
                rwmh(
                    move |u: &DVector<f64>| {
                        let residual = obs_h.whiten(&(obs_h.y() - &a_h * u));
                        let centered = prior_chol.solve_lower(&(u - &prior_mean));
                        -0.5 * residual.norm_squared() - 0.5 * centered.norm_squared()
                    },
                    &prior,
                    &config,
                )
            }
            RpSampler::Pmmh | RpSampler::Mcwm => {
                let obs = Observation::new(
                    problem.base().y().clone(),
                    problem.base().gamma().clone(),
                )?;
                let map = problem.forward_map();
                if sampler == RpSampler::Pmmh {
                    pmmh(&obs, &map, &prior, &config)
                } else {
                    mcwm(&obs, &map, &prior, &config)
                }
            }
        }
    };
    match run() {
        Ok(chain) => write_handle(out, RpChain(chain)),
        Err(e) => status_of(&e),
    }
}

/// Releases a chain handle. Passing NULL is a no-op.
///
/// # Safety
/// `c` must be a handle obtained from this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn rp_chain_free(c: *mut RpChain) {
    if !c.is_null() {
        drop(unsafe { Box::from_raw(c) });
    }
}

/// Number of retained states; 0 for NULL.
///
/// # Safety
/// `c` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn rp_chain_len(c: *const RpChain) -> usize {
    unsafe { c.as_ref() }.map_or(0, |c| c.0.len())
}

/// State dimension; 0 for NULL.
///
/// # Safety
/// `c` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn rp_chain_dim(c: *const RpChain) -> usize {
    unsafe { c.as_ref() }.map_or(0, |c| c.0.dim())
}

/// Fraction of accepted proposals; NaN for NULL.
///
/// # Safety
/// `c` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn rp_chain_acceptance_ratio(c: *const RpChain) -> f64 {
    unsafe { c.as_ref() }.map_or(f64::NAN, |c| c.0.acceptance_ratio())
}

/// Total forward-map evaluations consumed by the run.
///
/// # Safety
/// `c` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn rp_chain_forward_evals(c: *const RpChain) -> u64 {
    unsafe { c.as_ref() }.map_or(0, |c| c.0.forward_evals())
}

/// Copies the states into `out` (row-major `len x dim`).
///
/// # Safety
/// `out` must have room for `rp_chain_len(c) * rp_chain_dim(c)` doubles.
#[no_mangle]
pub unsafe extern "C" fn rp_chain_states(c: *const RpChain, out: *mut f64) -> RpStatus {
    let Some(c) = (unsafe { c.as_ref() }) else {
        return RpStatus::NullPointer;
    };
    if out.is_null() {
        return RpStatus::NullPointer;
    }
    let states = c.0.states();
    let (n, d) = (states.nrows(), states.ncols());
    let target = unsafe { std::slice::from_raw_parts_mut(out, n * d) };
    for i in 0..n {
        for j in 0..d {
            target[i * d + j] = states[(i, j)];
        }
    }
    RpStatus::Ok
}
