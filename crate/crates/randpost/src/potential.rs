//! Potentials and their Monte Carlo estimators.
//!
//! The potential of an observation `y` with noise covariance `Gamma` is
//! `Phi(u) = (1/2) |Gamma^{-1/2} (y - G(u))|^2`. For a randomized forward
//! map the likelihood `exp(-Phi_h(u))` is a random variable; this module
//! provides its `M`-sample Monte Carlo average, the normalizing-constant
//! estimators, the weighted average used by the averaged posterior, and an
//! empirical variance sweep over the discretization parameter.
//!
//! Likelihood values are carried in log space and exponentiated as late as
//! possible: small observation noise pushes potentials into the thousands
//! at prior-typical points, far beyond what `exp` can represent.

use nalgebra::{DMatrix, DVector};

use crate::analytic;
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, RandomizedForwardModel, RandomizedLinearForwardMap};
use crate::gaussian::{cholesky, CholeskyFactor, GaussianMeasure};
use crate::rng::SeededRng;

/// An observation `y` with SPD noise covariance `Gamma` and the whitening
/// factor that applies `Gamma^{-1/2}`.
#[derive(Debug, Clone)]
pub struct Observation {
    y: DVector<f64>,
    gamma: DMatrix<f64>,
    whitener: CholeskyFactor,
}

impl Observation {
    pub fn new(y: DVector<f64>, gamma: DMatrix<f64>) -> Result<Self> {
        if gamma.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: y.len(),
                actual: gamma.nrows(),
            });
        }
        let whitener = cholesky(&gamma)?;
        Ok(Self { y, gamma, whitener })
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn whitener(&self) -> &CholeskyFactor {
        &self.whitener
    }

    /// Applies `Gamma^{-1/2}` in the Cholesky sense (`L^{-1} r`).
    pub fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        self.whitener.solve_lower(r)
    }
}

/// `Phi(u) = (1/2) |Gamma^{-1/2} (y - g_of_u)|^2` for an already evaluated
/// forward value `g_of_u`.
pub fn potential_exact(obs: &Observation, g_of_u: &DVector<f64>) -> Result<f64> {
    if g_of_u.len() != obs.dim() {
        return Err(Error::DimensionMismatch {
            expected: obs.dim(),
            actual: g_of_u.len(),
        });
    }
    Ok(0.5 * obs.whiten(&(obs.y() - g_of_u)).norm_squared())
}

/// `log((1/n) sum_i exp(v_i))`, `-inf` when every `v_i` is `-inf`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}

/// `M` independent likelihood realizations `exp(-Phi_h^(i)(u))` at one
/// point, kept in log space.
#[derive(Debug, Clone)]
pub struct LikelihoodBatch {
    log_values: Vec<f64>,
    point: DVector<f64>,
    streams_used: Vec<u64>,
}

impl LikelihoodBatch {
    /// Wraps externally computed log likelihood realizations (for example
    /// from a set of frozen forward maps) into a batch. No stream ids are
    /// recorded.
    pub fn from_log_values(log_values: Vec<f64>, point: DVector<f64>) -> Self {
        Self {
            log_values,
            point,
            streams_used: Vec::new(),
        }
    }

    pub fn m(&self) -> usize {
        self.log_values.len()
    }

    /// The log likelihood realizations `-Phi_h^(i)(u)`, each `<= 0`.
    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    /// The likelihood realizations in linear space, each in `(0, 1]`.
    pub fn values(&self) -> Vec<f64> {
        self.log_values.iter().map(|v| v.exp()).collect()
    }

    /// Log of the batch mean, i.e. the log of the estimator
    /// `exp^M(-Phi_h(u))`.
    pub fn log_mean(&self) -> f64 {
        log_mean_exp(&self.log_values)
    }

    /// The estimator `exp^M(-Phi_h(u))` itself.
    pub fn mean(&self) -> f64 {
        self.log_mean().exp()
    }

    pub fn point(&self) -> &DVector<f64> {
        &self.point
    }

    /// Stream ids consumed by the `M` inner draws.
    pub fn streams_used(&self) -> &[u64] {
        &self.streams_used
    }
}

/// Draws `M` independent forward realizations at `u` and records the
/// likelihood of each. The batch mean is an unbiased estimator of the
/// expected likelihood under the forward-map randomization.
///
/// Draw `j` consumes the sub-stream `rng.derive(&[j])`, so passing a
/// per-iteration generator gives every inner draw a stream determined by
/// (chain seed, iteration, draw index).
pub fn mc_likelihood<M>(
    obs: &Observation,
    map: &M,
    u: &DVector<f64>,
    m_draws: usize,
    rng: &SeededRng,
) -> Result<LikelihoodBatch>
where
    M: RandomizedForwardModel + ?Sized,
{
    if m_draws == 0 {
        return Err(Error::InsufficientData("mc_likelihood needs M >= 1".into()));
    }
    let mut log_values = Vec::with_capacity(m_draws);
    let mut streams_used = Vec::with_capacity(m_draws);
    for j in 0..m_draws {
        let mut draw_rng = rng.derive(&[j as u64]);
        streams_used.push(draw_rng.stream_id());
        let g = map.apply_randomized(u, &mut draw_rng);
        log_values.push(-potential_exact(obs, &g)?);
    }
    Ok(LikelihoodBatch {
        log_values,
        point: u.clone(),
        streams_used,
    })
}

/// How a normalizing constant was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZMethod {
    PriorMonteCarlo,
    TensorQuadrature,
}

/// An estimate of `Z = Int exp(-Phi(u)) dmu_0(u)`.
#[derive(Debug, Clone)]
pub struct NormalizingEstimate {
    pub value: f64,
    pub method: ZMethod,
    pub sample_count_or_nodes: usize,
}

/// Half width, in prior standard deviations, of the tensor quadrature grid.
const QUADRATURE_HALF_WIDTH: f64 = 10.0;

/// Estimates the normalizing constant of `exp(-Phi) dmu_0` for a
/// deterministic map (the exact map or one frozen realization).
///
/// `resolution` is the sample count for prior Monte Carlo and the per-axis
/// node count for tensor quadrature; quadrature is limited to `d <= 3`.
pub fn normalizing_constant<M>(
    obs: &Observation,
    map: &M,
    prior: &GaussianMeasure,
    method: ZMethod,
    resolution: usize,
    rng: &SeededRng,
) -> Result<NormalizingEstimate>
where
    M: ForwardModel + ?Sized,
{
    if prior.dim() != map.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: map.input_dim(),
            actual: prior.dim(),
        });
    }
    let value = match method {
        ZMethod::PriorMonteCarlo => {
            if resolution == 0 {
                return Err(Error::InsufficientData(
                    "prior Monte Carlo needs >= 1 sample".into(),
                ));
            }
            let mut rng = rng.derive(&[0]);
            let log_values: Vec<f64> = (0..resolution)
                .map(|_| {
                    let u = prior.sample(&mut rng);
                    potential_exact(obs, &map.apply(&u)).map(|phi| -phi)
                })
                .collect::<Result<_>>()?;
            log_mean_exp(&log_values).exp()
        }
        ZMethod::TensorQuadrature => {
            if prior.dim() > 3 {
                return Err(Error::UnsupportedDimension(prior.dim()));
            }
            if resolution < 3 {
                return Err(Error::InsufficientData(
                    "tensor quadrature needs >= 3 nodes per axis".into(),
                ));
            }
            prior_quadrature(prior, resolution, |u| {
                potential_exact(obs, &map.apply(u)).map(|phi| (-phi).exp())
            })?
        }
    };
    Ok(NormalizingEstimate {
        value,
        method,
        sample_count_or_nodes: resolution,
    })
}

/// Trapezoidal tensor quadrature of `f` against a Gaussian prior, carried
/// out in whitened coordinates `u = m_0 + L_0 z` over `|z_k| <= 10`.
pub fn prior_quadrature(
    prior: &GaussianMeasure,
    nodes_per_axis: usize,
    mut f: impl FnMut(&DVector<f64>) -> Result<f64>,
) -> Result<f64> {
    let d = prior.dim();
    if d > 3 {
        return Err(Error::UnsupportedDimension(d));
    }
    let n = nodes_per_axis;
    let step = 2.0 * QUADRATURE_HALF_WIDTH / (n - 1) as f64;
    let node = |i: usize| -QUADRATURE_HALF_WIDTH + i as f64 * step;
    let weight = |i: usize| if i == 0 || i == n - 1 { 0.5 * step } else { step };
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();

    let mut indices = vec![0usize; d];
    let mut z = DVector::zeros(d);
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for (axis, &i) in indices.iter().enumerate() {
            z[axis] = node(i);
            w *= weight(i) * phi(z[axis]);
        }
        let u = prior.mean() + prior.cholesky().transform(&z);
        total += w * f(&u)?;

        // Odometer increment over the tensor grid.
        let mut axis = 0;
        loop {
            if axis == d {
                return Ok(total);
            }
            indices[axis] += 1;
            if indices[axis] < n {
                break;
            }
            indices[axis] = 0;
            axis += 1;
        }
    }
}

/// The likelihood average weighted by normalization constants,
/// `(1/M) sum_i exp(-Phi_h^(i)(u)) Z^M / Z^(i)` with `Z^M` the mean of the
/// per-draw constants. This is the unnormalized density of the Monte Carlo
/// averaged posterior against the prior.
pub fn weighted_mc_likelihood(batch: &LikelihoodBatch, per_draw_z: &[f64]) -> Result<f64> {
    if per_draw_z.len() != batch.m() {
        return Err(Error::DimensionMismatch {
            expected: batch.m(),
            actual: per_draw_z.len(),
        });
    }
    for &z in per_draw_z {
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::NonPositiveWeight(z));
        }
    }
    let z_mean = per_draw_z.iter().sum::<f64>() / per_draw_z.len() as f64;
    let shifted: Vec<f64> = batch
        .log_values()
        .iter()
        .zip(per_draw_z)
        .map(|(lv, z)| lv - z.ln())
        .collect();
    Ok((log_mean_exp(&shifted) + z_mean.ln()).exp())
}

/// Empirical estimator variances per discretization level.
#[derive(Debug, Clone)]
pub struct VarianceRow {
    pub h: f64,
    pub var_exp_m: f64,
    pub var_z_m: f64,
}

/// Measures `Var[exp^M(-Phi_h(u))]` and `Var[Z_h^M]` across independent
/// replicates for each `h` in the linear model.
///
/// The likelihood variance is accumulated in the frame scaled by
/// `exp(Phi(u))` (the exact-map potential, independent of `h`) so the
/// statistic survives potentials far beyond the range of `exp`; the
/// reported value is scaled back. Per-draw constants `Z_h^(i)` use the
/// conjugate closed form for the frozen realization.
pub fn estimator_variance_sweep<F>(
    obs: &Observation,
    map_family: F,
    prior: &GaussianMeasure,
    u: &DVector<f64>,
    h_values: &[f64],
    m_draws: usize,
    replicates: usize,
    rng: &SeededRng,
) -> Result<Vec<VarianceRow>>
where
    F: Fn(f64) -> RandomizedLinearForwardMap,
{
    if replicates < 100 {
        return Err(Error::InsufficientData(format!(
            "variance sweep needs >= 100 replicates, got {replicates}"
        )));
    }
    if m_draws == 0 || h_values.is_empty() {
        return Err(Error::InsufficientData(
            "variance sweep needs M >= 1 and at least one h".into(),
        ));
    }

    let exact_matrix = map_family(0.0).effective_matrix().clone();
    let phi_ref = potential_exact(obs, &(&exact_matrix * u))?;

    let mut rows = Vec::with_capacity(h_values.len());
    for (hi, &h) in h_values.iter().enumerate() {
        let map = map_family(h);
        let a_h = map.effective_matrix().clone();
        let base_problem = analytic::LinearGaussianProblem::new(
            a_h.clone(),
            obs.gamma().clone(),
            prior.mean().clone(),
            prior.covariance().clone(),
            obs.y().clone(),
        )?;
        let mean_at_u = &a_h * u;

        let mut est_values = Vec::with_capacity(replicates);
        let mut z_means = Vec::with_capacity(replicates);
        for r in 0..replicates {
            let mut rep_rng = rng.derive(&[hi as u64, r as u64]);
            let mut scaled = Vec::with_capacity(m_draws);
            let mut z_sum = 0.0;
            for _ in 0..m_draws {
                let xi = map.draw_noise(&mut rep_rng);
                let g = &mean_at_u + &xi * h;
                let phi_h = potential_exact(obs, &g)?;
                scaled.push((phi_ref - phi_h).exp());
                z_sum += analytic::evidence_for_data(&base_problem, &(obs.y() - &xi * h))?;
            }
            est_values.push(scaled.iter().sum::<f64>() / m_draws as f64);
            z_means.push(z_sum / m_draws as f64);
        }
        rows.push(VarianceRow {
            h,
            var_exp_m: sample_variance(&est_values) * (-2.0 * phi_ref).exp(),
            var_z_m: sample_variance(&z_means),
        });
    }
    Ok(rows)
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::LinearForwardMap;
    use approx::assert_relative_eq;

    fn isotropic_obs(y: Vec<f64>, sigma: f64) -> Observation {
        let m = y.len();
        Observation::new(
            DVector::from_vec(y),
            DMatrix::identity(m, m) * sigma * sigma,
        )
        .unwrap()
    }

    /// Closed-form expected likelihood for the linear randomized map:
    /// `E[exp(-Phi_h(u))] = sqrt(det Gamma / det Gamma_h)
    ///  exp(-(1/2) r' Gamma_h^{-1} r)` with `r = y - A_h u`,
    /// `Gamma_h = Gamma + h^2 Q`. Independent of the estimator code path.
    fn expected_likelihood(
        obs: &Observation,
        map: &RandomizedLinearForwardMap,
        u: &DVector<f64>,
    ) -> f64 {
        let gamma_h = obs.gamma() + map.noise_covariance() * map.h() * map.h();
        let r = obs.y() - map.effective_matrix() * u;
        let chol_g = cholesky(obs.gamma()).unwrap();
        let chol_gh = cholesky(&gamma_h).unwrap();
        let quad = chol_gh.solve_lower(&r).norm_squared();
        (0.5 * (chol_g.log_det() - chol_gh.log_det()) - 0.5 * quad).exp()
    }

    #[test]
    fn potential_trivial_cases() {
        let obs = isotropic_obs(vec![1.0, 2.0], 1.0);
        assert_eq!(potential_exact(&obs, obs.y()).unwrap(), 0.0);

        let obs = isotropic_obs(vec![3.0, 4.0], 1.0);
        let g = DVector::zeros(2);
        assert_relative_eq!(potential_exact(&obs, &g).unwrap(), 12.5, epsilon = 1e-12);

        let obs = isotropic_obs(vec![0.1, 0.0, 0.0], 0.1);
        let g = DVector::zeros(3);
        assert_relative_eq!(potential_exact(&obs, &g).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn whitener_squares_to_inverse_gamma() {
        let gamma = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.5]);
        let obs = Observation::new(DVector::zeros(2), gamma.clone()).unwrap();
        let w = obs
            .whitener()
            .solve_lower_matrix(&DMatrix::identity(2, 2));
        let gamma_inv = cholesky(&gamma).unwrap().inverse();
        let err = (w.transpose() * &w - &gamma_inv).norm() / gamma_inv.norm();
        assert!(err <= 1e-10);
    }

    #[test]
    fn mc_likelihood_m_one_and_deterministic_map() {
        let obs = isotropic_obs(vec![1.0, 0.0], 1.0);
        let a = DMatrix::identity(2, 2);
        let map = RandomizedLinearForwardMap::new(
            a.clone(),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            0.25,
        )
        .unwrap();
        let u = DVector::from_vec(vec![0.5, 0.5]);
        let rng = SeededRng::new(3, 0);
        let batch = mc_likelihood(&obs, &map, &u, 1, &rng).unwrap();
        assert_eq!(batch.m(), 1);
        assert_eq!(batch.mean(), batch.values()[0]);

        // h = 0: every realization equals exp(-Phi(u)), batch variance 0.
        let map0 =
            RandomizedLinearForwardMap::new(a.clone(), DMatrix::identity(2, 2), DMatrix::identity(2, 2), 0.0)
                .unwrap();
        let batch0 = mc_likelihood(&obs, &map0, &u, 16, &rng).unwrap();
        let exact = (-potential_exact(&obs, &(&a * &u)).unwrap()).exp();
        for v in batch0.values() {
            assert_relative_eq!(v, exact, epsilon = 1e-15);
        }
    }

    #[test]
    fn mc_likelihood_mean_matches_gaussian_convolution() {
        let mut rng = SeededRng::new(41, 0);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.uniform_in(-1.0, 1.0));
        let map = RandomizedLinearForwardMap::new(
            a,
            DMatrix::identity(3, 3),
            DMatrix::identity(3, 3),
            0.25,
        )
        .unwrap();
        // sigma = 0.5 keeps the per-draw relative spread of order one, so
        // the empirical CLT band is trustworthy at this sample size.
        let u_dagger = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let y = map.matrix_a() * &u_dagger;
        let obs = Observation::new(y, DMatrix::identity(3, 3) * 0.25).unwrap();
        let u = &u_dagger * 0.9;

        let m = 10_000;
        let batch = mc_likelihood(&obs, &map, &u, m, &SeededRng::new(7, 1)).unwrap();
        let values = batch.values();
        let mean = values.iter().sum::<f64>() / m as f64;
        let sd = (sample_variance(&values) / m as f64).sqrt();
        let expected = expected_likelihood(&obs, &map, &u);
        assert!(
            (mean - expected).abs() <= 3.0 * sd,
            "mean {mean}, expected {expected}, sd {sd}"
        );
    }

    #[test]
    fn mc_likelihood_is_unbiased_across_replicates() {
        let a = DMatrix::from_row_slice(2, 2, &[0.8, -0.3, 0.2, 0.5]);
        let map = RandomizedLinearForwardMap::new(
            a.clone(),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            0.3,
        )
        .unwrap();
        let obs = isotropic_obs(vec![0.7, -0.2], 1.0);
        let u = DVector::from_vec(vec![0.4, 0.1]);
        let base = SeededRng::new(11, 0);
        let replicates = 10_000;
        let means: Vec<f64> = (0..replicates)
            .map(|r| {
                mc_likelihood(&obs, &map, &u, 4, &base.derive(&[r as u64]))
                    .unwrap()
                    .mean()
            })
            .collect();
        let grand = means.iter().sum::<f64>() / replicates as f64;
        let sd = (sample_variance(&means) / replicates as f64).sqrt();
        let expected = expected_likelihood(&obs, &map, &u);
        assert!(
            (grand - expected).abs() <= 3.0 * sd,
            "grand {grand}, expected {expected}, sd {sd}"
        );
    }

    #[test]
    fn normalizing_constant_unit_likelihood() {
        // A = 0, y = 0 makes Phi vanish identically, so Z = 1.
        let obs = isotropic_obs(vec![0.0, 0.0], 1.0);
        let map = LinearForwardMap::new(DMatrix::zeros(2, 2)).unwrap();
        let prior = GaussianMeasure::standard(2);
        let rng = SeededRng::new(0, 0);
        let mc = normalizing_constant(&obs, &map, &prior, ZMethod::PriorMonteCarlo, 100, &rng)
            .unwrap();
        assert_relative_eq!(mc.value, 1.0, epsilon = 1e-12);
        let quad =
            normalizing_constant(&obs, &map, &prior, ZMethod::TensorQuadrature, 201, &rng)
                .unwrap();
        assert_relative_eq!(quad.value, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn normalizing_constant_matches_conjugate_evidence() {
        // One-dimensional conjugate model: Z has a closed form.
        let a_val = 2.0;
        let gamma = 1.0;
        let c0 = 1.0;
        let m0 = 0.0;
        let y = 4.0;
        let obs = Observation::new(
            DVector::from_vec(vec![y]),
            DMatrix::from_vec(1, 1, vec![gamma]),
        )
        .unwrap();
        let map = LinearForwardMap::new(DMatrix::from_vec(1, 1, vec![a_val])).unwrap();
        let prior = GaussianMeasure::new(
            DVector::from_vec(vec![m0]),
            DMatrix::from_vec(1, 1, vec![c0]),
        )
        .unwrap();
        let s = gamma + a_val * a_val * c0;
        let closed = (gamma / s).sqrt() * (-(y - a_val * m0).powi(2) / (2.0 * s)).exp();

        let quad = normalizing_constant(
            &obs,
            &map,
            &prior,
            ZMethod::TensorQuadrature,
            401,
            &SeededRng::new(0, 0),
        )
        .unwrap();
        assert!((quad.value - closed).abs() <= 1e-6, "{} vs {closed}", quad.value);

        // Cross-check the two methods at Monte Carlo accuracy.
        let n = 100_000;
        let mut rng = SeededRng::new(9, 0);
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let u = prior.sample(&mut rng);
                (-potential_exact(&obs, &map.apply(&u)).unwrap()).exp()
            })
            .collect();
        let mc_mean = values.iter().sum::<f64>() / n as f64;
        let sd = (sample_variance(&values) / n as f64).sqrt();
        assert!((mc_mean - quad.value).abs() <= 3.0 * sd);
    }

    #[test]
    fn normalizing_constant_rejects_high_dimension_quadrature() {
        let obs = isotropic_obs(vec![0.0; 4], 1.0);
        let map = LinearForwardMap::new(DMatrix::zeros(4, 4)).unwrap();
        let prior = GaussianMeasure::standard(4);
        let res = normalizing_constant(
            &obs,
            &map,
            &prior,
            ZMethod::TensorQuadrature,
            41,
            &SeededRng::new(0, 0),
        );
        assert!(matches!(res, Err(Error::UnsupportedDimension(4))));
    }

    #[test]
    fn weighted_likelihood_reduces_to_plain_mean() {
        let batch =
            LikelihoodBatch::from_log_values(vec![-1.0, -2.0, -3.0], DVector::zeros(1));
        let equal = weighted_mc_likelihood(&batch, &[0.7, 0.7, 0.7]).unwrap();
        assert_relative_eq!(equal, batch.mean(), epsilon = 1e-14);

        let single = LikelihoodBatch::from_log_values(vec![-1.5], DVector::zeros(1));
        let w = weighted_mc_likelihood(&single, &[0.3]).unwrap();
        assert_relative_eq!(w, (-1.5_f64).exp(), epsilon = 1e-14);

        assert!(matches!(
            weighted_mc_likelihood(&single, &[0.0]),
            Err(Error::NonPositiveWeight(_))
        ));
    }

    #[test]
    fn weighted_likelihood_integrates_to_z_mean() {
        // In d = 1, the prior integral of the weighted estimator is Z_h^M.
        let a = DMatrix::from_vec(1, 1, vec![1.2]);
        let map = RandomizedLinearForwardMap::new(
            a,
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            0.4,
        )
        .unwrap();
        let obs = isotropic_obs(vec![0.9], 1.0);
        let prior = GaussianMeasure::standard(1);
        let m = 8;
        let mut noise_rng = SeededRng::new(23, 0);
        let xis: Vec<DVector<f64>> = (0..m).map(|_| map.draw_noise(&mut noise_rng)).collect();

        let frozen: Vec<_> = xis.iter().map(|xi| map.freeze_with(xi)).collect();
        let z: Vec<f64> = frozen
            .iter()
            .map(|f| {
                normalizing_constant(
                    &obs,
                    f,
                    &prior,
                    ZMethod::TensorQuadrature,
                    801,
                    &SeededRng::new(0, 0),
                )
                .unwrap()
                .value
            })
            .collect();
        let z_mean = z.iter().sum::<f64>() / m as f64;

        let integral = prior_quadrature(&prior, 801, |u| {
            let log_values: Vec<f64> = frozen
                .iter()
                .map(|f| -potential_exact(&obs, &f.apply(u)).unwrap())
                .collect();
            let batch = LikelihoodBatch::from_log_values(log_values, u.clone());
            weighted_mc_likelihood(&batch, &z)
        })
        .unwrap();
        assert!((integral - z_mean).abs() <= 1e-6, "{integral} vs {z_mean}");
    }

    #[test]
    fn variance_sweep_zero_h_and_slope() {
        let mut rng = SeededRng::new(4, 0);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.uniform_in(-1.0, 1.0));
        let family = |h: f64| {
            RandomizedLinearForwardMap::new(
                a.clone(),
                DMatrix::identity(3, 3),
                DMatrix::identity(3, 3),
                h,
            )
            .unwrap()
        };
        let u_dagger = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let obs = Observation::new(&a * &u_dagger, DMatrix::identity(3, 3)).unwrap();
        let prior = GaussianMeasure::standard(3);
        let u = DVector::from_vec(vec![0.9, 1.8, 2.7]);

        let rows = estimator_variance_sweep(
            &obs,
            family,
            &prior,
            &u,
            &[0.0],
            8,
            100,
            &SeededRng::new(1, 0),
        )
        .unwrap();
        // At h = 0 every realization coincides; only summation roundoff
        // survives.
        assert!(rows[0].var_exp_m <= 1e-30);
        assert!(rows[0].var_z_m <= 1e-30);

        let h_values: Vec<f64> = (3..=8).map(|k| 0.5_f64.powi(k)).collect();
        let rows = estimator_variance_sweep(
            &obs,
            family,
            &prior,
            &u,
            &h_values,
            8,
            400,
            &SeededRng::new(2, 0),
        )
        .unwrap();
        let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.h, r.var_exp_m)).collect();
        let fit = crate::diagnostics::fit_rate(&pairs).unwrap();
        assert!((fit.slope - 2.0).abs() <= 0.4, "slope {}", fit.slope);
        let z_pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.h, r.var_z_m)).collect();
        let z_fit = crate::diagnostics::fit_rate(&z_pairs).unwrap();
        assert!((z_fit.slope - 2.0).abs() <= 0.4, "Z slope {}", z_fit.slope);
    }

    #[test]
    fn variance_scales_inversely_with_m() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.4, 0.7]);
        let family = |h: f64| {
            RandomizedLinearForwardMap::new(
                a.clone(),
                DMatrix::identity(2, 2),
                DMatrix::identity(2, 2),
                h,
            )
            .unwrap()
        };
        let obs = isotropic_obs(vec![0.5, 1.0], 1.0);
        let prior = GaussianMeasure::standard(2);
        let u = DVector::from_vec(vec![0.3, -0.6]);
        let var_at = |m: usize| {
            estimator_variance_sweep(
                &obs,
                family,
                &prior,
                &u,
                &[0.25],
                m,
                2_000,
                &SeededRng::new(5, 0),
            )
            .unwrap()[0]
                .var_exp_m
        };
        let products: Vec<f64> = [4usize, 16, 64, 256]
            .iter()
            .map(|&m| var_at(m) * m as f64)
            .collect();
        let mean = products.iter().sum::<f64>() / products.len() as f64;
        for p in &products {
            assert!(
                (p - mean).abs() / mean < 0.25,
                "products {products:?} deviate beyond 25%"
            );
        }
        // Doubling M halves the variance within 20%.
        let ratio = var_at(8) / var_at(16);
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
    }
}
