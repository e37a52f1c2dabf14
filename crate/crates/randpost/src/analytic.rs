//! Closed-form linear-Gaussian posteriors.
//!
//! For the linear model `y = A u + noise` with Gaussian prior and noise,
//! the posterior is Gaussian with precision `A' Gamma^{-1} A + C0^{-1}`.
//! Randomizing the map to `u -> A_h u + h xi`, `xi ~ N(0, Q)`, yields four
//! related measures, all explicit:
//!
//! - the *sample* posterior for one frozen `xi` (data shifted to `y - h xi`),
//! - the *marginal* posterior, obtained by inflating the noise to
//!   `Gamma_h = Gamma + h^2 Q`,
//! - the *averaged* posterior, the expectation of the sample posteriors
//!   over `xi`, computed through the random-Gaussian-average identity,
//! - the equal-weight Gaussian *mixture* over finitely many `xi` draws,
//!   with pooled moments by the law of total variance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forward::RandomizedLinearForwardMap;
use crate::gaussian::{cholesky, GaussianMeasure};

/// Condition-number bound beyond which a posterior precision is rejected.
const CONDITION_LIMIT: f64 = 1e12;

/// The deterministic linear-Gaussian inverse problem
/// `find u given y = A u + noise`, `noise ~ N(0, Gamma)`, prior `N(m0, C0)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianProblem {
    a: DMatrix<f64>,
    gamma: DMatrix<f64>,
    prior: GaussianMeasure,
    y: DVector<f64>,
}

impl LinearGaussianProblem {
    pub fn new(
        a: DMatrix<f64>,
        gamma: DMatrix<f64>,
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
        y: DVector<f64>,
    ) -> Result<Self> {
        let (m, d) = a.shape();
        if y.len() != m || gamma.nrows() != m || gamma.ncols() != m {
            return Err(Error::InvalidArgument(format!(
                "observation space mismatch: A is {m}x{d}, gamma {}x{}, y has length {}",
                gamma.nrows(),
                gamma.ncols(),
                y.len()
            )));
        }
        if prior_mean.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: prior_mean.len(),
            });
        }
        cholesky(&gamma)?;
        let prior = GaussianMeasure::new(prior_mean, prior_cov)?;
        Ok(Self { a, gamma, prior, y })
    }

    pub fn parameter_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn observation_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn prior(&self) -> &GaussianMeasure {
        &self.prior
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
}

/// The randomized variant: effective matrix `A_h = A + h P` and additive
/// noise `h xi` with `xi ~ N(0, Q)`.
#[derive(Debug, Clone)]
pub struct RandomizedLinearGaussianProblem {
    base: LinearGaussianProblem,
    p: DMatrix<f64>,
    q: DMatrix<f64>,
    h: f64,
}

impl RandomizedLinearGaussianProblem {
    pub fn new(base: LinearGaussianProblem, p: DMatrix<f64>, q: DMatrix<f64>, h: f64) -> Result<Self> {
        // Reuse the forward-map validation of P, Q and h.
        RandomizedLinearForwardMap::new(base.a.clone(), p.clone(), q.clone(), h)?;
        Ok(Self { base, p, q, h })
    }

    pub fn base(&self) -> &LinearGaussianProblem {
        &self.base
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// `A_h = A + h P`.
    pub fn a_h(&self) -> DMatrix<f64> {
        &self.base.a + &self.p * self.h
    }

    /// `Gamma_h = Gamma + h^2 Q`, the noise inflated by the randomization.
    pub fn gamma_h(&self) -> DMatrix<f64> {
        &self.base.gamma + &self.q * (self.h * self.h)
    }

    /// The randomized forward map of this problem.
    pub fn forward_map(&self) -> RandomizedLinearForwardMap {
        RandomizedLinearForwardMap::new(
            self.base.a.clone(),
            self.p.clone(),
            self.q.clone(),
            self.h,
        )
        .expect("fields were validated at construction")
    }
}

/// Gaussian posterior of a conjugate model with the stated pieces:
/// precision `A' Gamma^{-1} A + C0^{-1}`, mean solved from
/// `A' Gamma^{-1} data + C0^{-1} m0`.
fn conjugate_posterior(
    a: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    prior: &GaussianMeasure,
    data: &DVector<f64>,
) -> Result<GaussianMeasure> {
    let gamma_chol = cholesky(gamma)?;
    let whitened_a = gamma_chol.solve_lower_matrix(a);
    let prior_precision = prior.cholesky().inverse();
    let precision = whitened_a.transpose() * &whitened_a + &prior_precision;
    let precision = (&precision + precision.transpose()) * 0.5;

    let eigenvalues = precision.clone().symmetric_eigen().eigenvalues;
    let lambda_max = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lambda_min = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let condition = lambda_max / lambda_min.max(f64::MIN_POSITIVE);
    log::debug!("posterior precision condition estimate {condition:.3e}");
    if !(condition.is_finite() && condition <= CONDITION_LIMIT) {
        return Err(Error::IllConditioned(condition));
    }

    let precision_chol = cholesky(&precision)?;
    let rhs = a.transpose() * gamma_chol.solve(data) + prior.cholesky().solve(prior.mean());
    let mean = precision_chol.solve(&rhs);
    let covariance = precision_chol.inverse();
    GaussianMeasure::new(mean, covariance)
}

/// The exact posterior `N(m, C)` with `C^{-1} = A' Gamma^{-1} A + C0^{-1}`
/// and `m = C (A' Gamma^{-1} y + C0^{-1} m0)`.
pub fn exact_posterior(p: &LinearGaussianProblem) -> Result<GaussianMeasure> {
    conjugate_posterior(&p.a, &p.gamma, &p.prior, &p.y)
}

/// The sample posterior for one frozen noise realization `xi`: the
/// conjugate posterior of `A_h` with the data shifted to `y - h xi`.
pub fn sample_posterior(
    p: &RandomizedLinearGaussianProblem,
    xi: &DVector<f64>,
) -> Result<GaussianMeasure> {
    if xi.len() != p.base.observation_dim() {
        return Err(Error::DimensionMismatch {
            expected: p.base.observation_dim(),
            actual: xi.len(),
        });
    }
    let data = &p.base.y - xi * p.h;
    conjugate_posterior(&p.a_h(), &p.base.gamma, &p.base.prior, &data)
}

/// The marginal posterior: the conjugate posterior of the modified problem
/// `(A_h, Gamma_h)` with the original data. Shares the exact-posterior code
/// path by construction.
pub fn marginal_posterior(p: &RandomizedLinearGaussianProblem) -> Result<GaussianMeasure> {
    let modified = LinearGaussianProblem::new(
        p.a_h(),
        p.gamma_h(),
        p.base.prior.mean().clone(),
        p.base.prior.covariance().clone(),
        p.base.y.clone(),
    )?;
    exact_posterior(&modified)
}

/// Expectation of the random Gaussian measure `N(F0 xi + F1, C)` over
/// `xi ~ N(xi_mean, xi_cov)`: the Gaussian
/// `N(F0 xi_mean + F1, C + F0 xi_cov F0')`.
///
/// `xi_cov` may be singular (a point mass in the limit), so the law is
/// passed as a moment pair rather than a validated measure.
pub fn gaussian_random_average(
    f0: &DMatrix<f64>,
    f1: &DVector<f64>,
    c: &DMatrix<f64>,
    xi_mean: &DVector<f64>,
    xi_cov: &DMatrix<f64>,
) -> Result<GaussianMeasure> {
    let (d, m) = f0.shape();
    if f1.len() != d || c.nrows() != d || c.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: f1.len().max(c.nrows()),
        });
    }
    if xi_mean.len() != m || xi_cov.nrows() != m || xi_cov.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            actual: xi_mean.len().max(xi_cov.nrows()),
        });
    }
    let mean = f0 * xi_mean + f1;
    let covariance = c + f0 * xi_cov * f0.transpose();
    GaussianMeasure::new(mean, covariance)
}

/// The averaged posterior: mean `C_s (A_h' Gamma^{-1} y + C0^{-1} m0)` and
/// covariance `C_s + h^2 C_s A_h' Gamma^{-1} Q Gamma^{-1} A_h C_s`,
/// composed as the random-Gaussian average of the sample posterior over
/// `xi ~ N(0, Q)` with `F0 = -h C_s A_h' Gamma^{-1}`.
pub fn averaged_posterior(p: &RandomizedLinearGaussianProblem) -> Result<GaussianMeasure> {
    let m = p.base.observation_dim();
    let base_component = sample_posterior(p, &DVector::zeros(m))?;
    let c_s = base_component.covariance();
    let gamma_chol = cholesky(&p.base.gamma)?;
    // F0 = -h C_s A_h' Gamma^{-1} = -h (Gamma^{-1} A_h C_s)'.
    let f0 = -(gamma_chol.solve_matrix(&(p.a_h() * c_s))).transpose() * p.h;
    gaussian_random_average(
        &f0,
        base_component.mean(),
        c_s,
        &DVector::zeros(m),
        &p.q,
    )
}

/// Applies `xi -> m_s(xi)`: the sample-posterior mean as an affine function
/// of the frozen noise. Returns the intercept (`xi = 0` mean), the shift
/// operator `T = h C_s A_h' Gamma^{-1}` and the shared covariance `C_s`.
fn sample_mean_affine(
    p: &RandomizedLinearGaussianProblem,
) -> Result<(DVector<f64>, DMatrix<f64>, GaussianMeasure)> {
    let m = p.base.observation_dim();
    let base_component = sample_posterior(p, &DVector::zeros(m))?;
    let gamma_chol = cholesky(&p.base.gamma)?;
    let shift = (gamma_chol.solve_matrix(&(p.a_h() * base_component.covariance()))).transpose()
        * p.h;
    Ok((base_component.mean().clone(), shift, base_component))
}

/// Pooled mean and covariance of the equal-weight Gaussian mixture over the
/// given noise draws. All components share the sample covariance `C_s`; the
/// pooled covariance adds the spread of the component means (law of total
/// variance).
pub fn mixture_moments(
    p: &RandomizedLinearGaussianProblem,
    xi_draws: &[DVector<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if xi_draws.is_empty() {
        return Err(Error::InsufficientData("mixture needs M >= 1 draws".into()));
    }
    let (intercept, shift, base_component) = sample_mean_affine(p)?;
    let d = p.base.parameter_dim();
    let m_count = xi_draws.len() as f64;

    let means: Vec<DVector<f64>> = xi_draws.iter().map(|xi| &intercept - &shift * xi).collect();
    let mut pooled_mean = DVector::zeros(d);
    for mi in &means {
        pooled_mean += mi;
    }
    pooled_mean /= m_count;

    let mut spread = DMatrix::zeros(d, d);
    for mi in &means {
        let delta = mi - &pooled_mean;
        spread += &delta * delta.transpose();
    }
    let covariance = base_component.covariance() + spread / m_count;
    Ok((pooled_mean, covariance))
}

/// Equal-weight mixture density of the sample posteriors at `point`.
pub fn mixture_density(
    p: &RandomizedLinearGaussianProblem,
    xi_draws: &[DVector<f64>],
    point: &DVector<f64>,
) -> Result<f64> {
    Ok(mixture_density_fn(p, xi_draws)?(point.as_slice()))
}

/// Precomputed mixture density, suitable for dense quadrature grids.
pub fn mixture_density_fn(
    p: &RandomizedLinearGaussianProblem,
    xi_draws: &[DVector<f64>],
) -> Result<impl Fn(&[f64]) -> f64> {
    if xi_draws.is_empty() {
        return Err(Error::InsufficientData("mixture needs M >= 1 draws".into()));
    }
    let (intercept, shift, base_component) = sample_mean_affine(p)?;
    let means: Vec<DVector<f64>> = xi_draws.iter().map(|xi| &intercept - &shift * xi).collect();
    let d = p.base.parameter_dim();
    let factor = base_component.cholesky().clone();
    let log_norm = 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * factor.log_det();
    Ok(move |x: &[f64]| {
        let point = DVector::from_row_slice(x);
        let log_components: Vec<f64> = means
            .iter()
            .map(|mi| -0.5 * factor.solve_lower(&(&point - mi)).norm_squared() - log_norm)
            .collect();
        crate::potential::log_mean_exp(&log_components).exp()
    })
}

/// Closed-form model evidence `Z = Int exp(-Phi(u)) dmu_0(u)` of the
/// conjugate problem, equal to
/// `sqrt(det Gamma / det S) exp(-(1/2) r' S^{-1} r)` with
/// `S = Gamma + A C0 A'` and `r = y - A m0`.
pub fn evidence(p: &LinearGaussianProblem) -> Result<f64> {
    evidence_for_data(p, &p.y)
}

/// Same as [`evidence`] with the observation replaced by `data`; used when
/// scanning evidence over shifted data without rebuilding the problem.
pub fn evidence_for_data(p: &LinearGaussianProblem, data: &DVector<f64>) -> Result<f64> {
    if data.len() != p.observation_dim() {
        return Err(Error::DimensionMismatch {
            expected: p.observation_dim(),
            actual: data.len(),
        });
    }
    let gamma_chol = cholesky(&p.gamma)?;
    let s = &p.gamma + &p.a * p.prior.covariance() * p.a.transpose();
    let s = (&s + s.transpose()) * 0.5;
    let s_chol = cholesky(&s)?;
    let r = data - &p.a * p.prior.mean();
    let quad = s_chol.solve_lower(&r).norm_squared();
    Ok((0.5 * (gamma_chol.log_det() - s_chol.log_det()) - 0.5 * quad).exp())
}
