#ifndef RANDPOST_H
#define RANDPOST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every fallible call.
 */
typedef enum RpStatus {
  RP_STATUS_OK = 0,
  RP_STATUS_NULL_POINTER = 1,
  RP_STATUS_INVALID_ARGUMENT = 2,
  RP_STATUS_DIMENSION_MISMATCH = 3,
  RP_STATUS_NOT_POSITIVE_DEFINITE = 4,
  RP_STATUS_NOT_SYMMETRIC = 5,
  RP_STATUS_ILL_CONDITIONED = 6,
  RP_STATUS_NUMERICAL_FAILURE = 7,
} RpStatus;

/**
 * Sampler selector for `rp_chain_run`.
 */
typedef enum RpSampler {
  /**
   * Random walk Metropolis-Hastings against the closed-form marginal
   * posterior (reference chain; `inner_m` is ignored).
   */
  RP_SAMPLER_RWMH = 0,
  /**
   * Pseudo-marginal Metropolis-Hastings with `inner_m` draws.
   */
  RP_SAMPLER_PMMH = 1,
  /**
   * Monte Carlo within Metropolis with `inner_m` draws.
   */
  RP_SAMPLER_MCWM = 2,
} RpSampler;

/**
 * Opaque Markov chain.
 */
typedef struct RpChain RpChain;

/**
 * Opaque Gaussian measure.
 */
typedef struct RpGaussian RpGaussian;

/**
 * Opaque randomized linear-Gaussian inverse problem.
 */
typedef struct RpProblem RpProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static description of a status code (NUL-terminated, never freed).
 */
const char *rp_status_message(enum RpStatus status);

/**
 * ABI version of this header; bumped on breaking changes.
 */
uint32_t rp_abi_version(void);

/**
 * Creates a Gaussian measure from a mean of length `dim` and a row-major
 * `dim x dim` covariance.
 *
 * # Safety
 * `mean` must point to `dim` doubles, `covariance` to `dim * dim`
 * doubles, and `out` must be a valid location for a handle.
 */
enum RpStatus rp_gaussian_new(size_t dim,
                              const double *mean,
                              const double *covariance,
                              struct RpGaussian **out);

/**
 * Releases a Gaussian handle. Passing NULL is a no-op.
 *
 * # Safety
 * `g` must be a handle obtained from this library and not freed before.
 */
void rp_gaussian_free(struct RpGaussian *g);

/**
 * Dimension of the measure; 0 for NULL.
 *
 * # Safety
 * `g` must be a live handle or NULL.
 */
size_t rp_gaussian_dim(const struct RpGaussian *g);

/**
 * Copies the mean into `out` (length `dim`).
 *
 * # Safety
 * `out` must have room for `rp_gaussian_dim(g)` doubles.
 */
enum RpStatus rp_gaussian_mean(const struct RpGaussian *g, double *out);

/**
 * Copies the covariance into `out` (row-major, length `dim * dim`).
 *
 * # Safety
 * `out` must have room for `dim * dim` doubles.
 */
enum RpStatus rp_gaussian_covariance(const struct RpGaussian *g, double *out);

/**
 * Log Lebesgue density at `point` (length `dim`).
 *
 * # Safety
 * `point` must point to `dim` doubles and `out` to one double.
 */
enum RpStatus rp_gaussian_log_density(const struct RpGaussian *g, const double *point, double *out);

/**
 * Draws `count` samples on the stream `(seed, stream)` into `out`
 * (row-major `count x dim`). Identical arguments reproduce identical
 * samples.
 *
 * # Safety
 * `out` must have room for `count * dim` doubles.
 */
enum RpStatus rp_gaussian_sample(const struct RpGaussian *g,
                                 uint64_t seed,
                                 uint64_t stream,
                                 size_t count,
                                 double *out);

/**
 * Hellinger distance between two Gaussians, in `[0, 1]`.
 *
 * # Safety
 * `a` and `b` must be live handles, `out` a valid double location.
 */
enum RpStatus rp_hellinger_gaussian(const struct RpGaussian *a,
                                    const struct RpGaussian *b,
                                    double *out);

/**
 * Creates a randomized linear-Gaussian problem.
 *
 * Shapes (all row-major): `a` and `p` are `m x d`, `q` and `gamma` are
 * `m x m`, `prior_mean` has length `d`, `prior_cov` is `d x d`, `y` has
 * length `m`. The randomized map is `u -> (A + hP) u + h xi`,
 * `xi ~ N(0, Q)`.
 *
 * # Safety
 * All pointers must reference buffers of the stated sizes.
 */
enum RpStatus rp_problem_new(size_t d,
                             size_t m,
                             const double *a,
                             const double *p,
                             const double *q,
                             double h,
                             const double *gamma,
                             const double *prior_mean,
                             const double *prior_cov,
                             const double *y,
                             struct RpProblem **out);

/**
 * Releases a problem handle. Passing NULL is a no-op.
 *
 * # Safety
 * `p` must be a handle obtained from this library and not freed before.
 */
void rp_problem_free(struct RpProblem *p);

/**
 * Exact posterior of the unperturbed problem.
 *
 * # Safety
 * `p` must be a live problem handle and `out` a valid location.
 */
enum RpStatus rp_problem_exact_posterior(const struct RpProblem *p, struct RpGaussian **out);

/**
 * Marginal posterior: noise inflated to `Gamma + h^2 Q`.
 *
 * # Safety
 * `p` must be a live problem handle and `out` a valid location.
 */
enum RpStatus rp_problem_marginal_posterior(const struct RpProblem *p, struct RpGaussian **out);

/**
 * Averaged posterior: expectation of the sample posteriors.
 *
 * # Safety
 * `p` must be a live problem handle and `out` a valid location.
 */
enum RpStatus rp_problem_averaged_posterior(const struct RpProblem *p, struct RpGaussian **out);

/**
 * Sample posterior for a frozen noise realization `xi` (length `m`).
 *
 * # Safety
 * `xi` must point to `m` doubles; `p` and `out` as above.
 */
enum RpStatus rp_problem_sample_posterior(const struct RpProblem *p,
                                          const double *xi,
                                          struct RpGaussian **out);

/**
 * Runs a chain of `n_steps` states on the problem, using the marginal
 * posterior covariance as proposal and a prior draw as initial state.
 * Identical `(seed, stream)` reproduce identical chains.
 *
 * # Safety
 * `p` must be a live problem handle and `out` a valid location.
 */
enum RpStatus rp_chain_run(const struct RpProblem *p,
                           enum RpSampler sampler,
                           size_t n_steps,
                           size_t inner_m,
                           uint64_t seed,
                           uint64_t stream,
                           struct RpChain **out);

/**
 * Releases a chain handle. Passing NULL is a no-op.
 *
 * # Safety
 * `c` must be a handle obtained from this library and not freed before.
 */
void rp_chain_free(struct RpChain *c);

/**
 * Number of retained states; 0 for NULL.
 *
 * # Safety
 * `c` must be a live handle or NULL.
 */
size_t rp_chain_len(const struct RpChain *c);

/**
 * State dimension; 0 for NULL.
 *
 * # Safety
 * `c` must be a live handle or NULL.
 */
size_t rp_chain_dim(const struct RpChain *c);

/**
 * Fraction of accepted proposals; NaN for NULL.
 *
 * # Safety
 * `c` must be a live handle or NULL.
 */
double rp_chain_acceptance_ratio(const struct RpChain *c);

/**
 * Total forward-map evaluations consumed by the run.
 *
 * # Safety
 * `c` must be a live handle or NULL.
 */
uint64_t rp_chain_forward_evals(const struct RpChain *c);

/**
 * Copies the states into `out` (row-major `len x dim`).
 *
 * # Safety
 * `out` must have room for `rp_chain_len(c) * rp_chain_dim(c)` doubles.
 */
enum RpStatus rp_chain_states(const struct RpChain *c, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RANDPOST_H */
