//! Dense Gaussian-measure primitives.
//!
//! A [`GaussianMeasure`] is a mean vector and a symmetric positive definite
//! covariance, factorized once on construction. Everything downstream
//! (sampling, log-densities, the closed-form Hellinger distance) works
//! through the cached Cholesky factor. Covariances are stored dense; the
//! target dimensions of this crate are small (a few to a few tens), so no
//! sparse or low-rank machinery is attempted.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Per-entry tolerance under which a covariance is accepted as symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Lower-triangular Cholesky factor `L` of an SPD matrix, `L L' = C`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
}

/// Factorizes a symmetric positive definite matrix.
///
/// Fails with [`Error::NotSymmetric`] when the entrywise asymmetry exceeds
/// [`SYMMETRY_TOLERANCE`] and with [`Error::NotPositiveDefinite`] when a
/// leading minor is not positive.
pub fn cholesky(matrix: &DMatrix<f64>) -> Result<CholeskyFactor> {
    if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "cholesky needs a square matrix of dimension >= 1, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    let max_asymmetry = max_asymmetry(matrix);
    if max_asymmetry > SYMMETRY_TOLERANCE {
        return Err(Error::NotSymmetric {
            max_asymmetry,
            tolerance: SYMMETRY_TOLERANCE,
        });
    }
    let chol = nalgebra::Cholesky::new(matrix.clone()).ok_or(Error::NotPositiveDefinite)?;
    Ok(CholeskyFactor { lower: chol.l() })
}

fn max_asymmetry(matrix: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..matrix.nrows() {
        for j in (i + 1)..matrix.ncols() {
            worst = worst.max((matrix[(i, j)] - matrix[(j, i)]).abs());
        }
    }
    worst
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `log det(L L')`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L x = b` (forward substitution); applies `C^{-1/2}` in the
    /// whitening sense.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// Solves `L L' x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.solve_lower(b);
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// Solves `L X = B` column by column.
    pub fn solve_lower_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// Solves `L L' X = B`.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.solve_lower_matrix(b);
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// The explicit inverse of `L L'`.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_matrix(&DMatrix::identity(self.dim(), self.dim()))
    }

    /// `L z`; maps standard normal draws onto `N(0, C)`.
    pub fn transform(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.lower * z
    }

    /// `L L'`, for reconstruction checks.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

/// A Gaussian measure `N(mean, covariance)` on `R^d`.
///
/// The covariance is symmetrized as `(C + C')/2` on construction (covariance
/// arithmetic downstream accumulates asymmetry at roundoff level); an
/// asymmetry beyond [`SYMMETRY_TOLERANCE`] is reported on the warning channel
/// rather than rejected. Positive definiteness is mandatory.
#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    factor: CholeskyFactor,
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::InvalidArgument(format!(
                "covariance {}x{} does not match mean of length {}",
                covariance.nrows(),
                covariance.ncols(),
                mean.len()
            )));
        }
        let asym = max_asymmetry(&covariance);
        if asym > SYMMETRY_TOLERANCE {
            log::warn!("symmetrizing covariance with entrywise asymmetry {asym:.3e}");
        }
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let factor = cholesky(&covariance)?;
        Ok(Self {
            mean,
            covariance,
            factor,
        })
    }

    /// The standard normal `N(0, I_d)`.
    pub fn standard(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim))
            .expect("identity covariance is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn cholesky(&self) -> &CholeskyFactor {
        &self.factor
    }

    /// One draw `mean + L z`, `z` standard normal.
    pub fn sample(&self, rng: &mut SeededRng) -> DVector<f64> {
        let z = rng.standard_normal_vector(self.dim());
        &self.mean + self.factor.transform(&z)
    }

    /// Log Lebesgue density at `point`.
    pub fn log_density(&self, point: &DVector<f64>) -> Result<f64> {
        if point.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: point.len(),
            });
        }
        let whitened = self.factor.solve_lower(&(point - &self.mean));
        let log_norm =
            0.5 * (self.dim() as f64) * (2.0 * std::f64::consts::PI).ln() + 0.5 * self.factor.log_det();
        Ok(-0.5 * whitened.norm_squared() - log_norm)
    }

    /// Lebesgue density at `point`.
    pub fn density(&self, point: &DVector<f64>) -> Result<f64> {
        Ok(self.log_density(point)?.exp())
    }
}

/// Hellinger distance between two Gaussians, in `[0, 1]`.
///
/// Uses the closed form
/// `d_H^2 = 1 - [det(Ca)^{1/4} det(Cb)^{1/4} / det(M)^{1/2}] exp(-(1/8) dm' M^{-1} dm)`
/// with `M = (Ca + Cb)/2` and `dm = ma - mb`, evaluated in log space.
pub fn hellinger_gaussian(a: &GaussianMeasure, b: &GaussianMeasure) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let mid = (a.covariance() + b.covariance()) * 0.5;
    let mid_factor = cholesky(&mid)?;
    let dm = a.mean() - b.mean();
    let quad = mid_factor.solve_lower(&dm).norm_squared();
    let log_bc = 0.25 * a.cholesky().log_det() + 0.25 * b.cholesky().log_det()
        - 0.5 * mid_factor.log_det()
        - 0.125 * quad;
    let squared = (1.0 - log_bc.exp()).clamp(0.0, 1.0);
    Ok(squared.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spd_from_square(m: &DMatrix<f64>) -> DMatrix<f64> {
        m.transpose() * m + DMatrix::identity(m.nrows(), m.ncols())
    }

    #[test]
    fn cholesky_identity() {
        let eye = DMatrix::identity(3, 3);
        let factor = cholesky(&eye).unwrap();
        assert_eq!(factor.lower(), &eye);
    }

    #[test]
    fn cholesky_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let factor = cholesky(&m).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert_relative_eq!(factor.lower(), &expected, epsilon = 1e-15);
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = SeededRng::new(11, 0);
        let m = DMatrix::from_fn(5, 5, |_, _| rng.standard_normal());
        let spd = spd_from_square(&m);
        let factor = cholesky(&spd).unwrap();
        let err = (factor.reconstruct() - &spd).norm() / spd.norm();
        assert!(err <= 1e-10, "relative reconstruction error {err}");
    }

    #[test]
    fn cholesky_rejects_asymmetry_and_indefiniteness() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(cholesky(&asym), Err(Error::NotSymmetric { .. })));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            cholesky(&indef),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn sample_degenerate_covariance_returns_mean() {
        let mean = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let measure =
            GaussianMeasure::new(mean.clone(), DMatrix::identity(3, 3) * 1e-20).unwrap();
        let mut rng = SeededRng::new(0, 0);
        let x = measure.sample(&mut rng);
        assert!((x - mean).norm() < 1e-8);
    }

    #[test]
    fn sample_is_deterministic_per_stream() {
        let measure = GaussianMeasure::standard(4);
        let a = measure.sample(&mut SeededRng::new(42, 3));
        let b = measure.sample(&mut SeededRng::new(42, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_empirical_moments_match() {
        let measure = GaussianMeasure::standard(3);
        let mut rng = SeededRng::new(7, 0);
        let n = 100_000;
        let mut sum = DVector::zeros(3);
        let mut sum_sq = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let x = measure.sample(&mut rng);
            sum += &x;
            sum_sq += &x * x.transpose();
        }
        let mean = sum / n as f64;
        for i in 0..3 {
            assert!(mean[i].abs() < 0.02, "coordinate {i}: {}", mean[i]);
        }
        let cov = sum_sq / n as f64 - &mean * mean.transpose();
        let err = (cov - measure.covariance()).norm() / measure.covariance().norm();
        assert!(err < 0.05, "covariance relative error {err}");
    }

    #[test]
    fn log_density_standard_normal() {
        let measure = GaussianMeasure::standard(1);
        let v = measure.log_density(&DVector::zeros(1)).unwrap();
        assert_relative_eq!(v, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);

        let measure2 = GaussianMeasure::standard(2);
        let v2 = measure2
            .log_density(&DVector::from_vec(vec![1.0, 1.0]))
            .unwrap();
        assert_relative_eq!(v2, -1.0 - (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn log_density_dimension_mismatch() {
        let measure = GaussianMeasure::standard(2);
        assert!(matches!(
            measure.log_density(&DVector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn density_integrates_to_one_on_tensor_grid() {
        // Random 3-d Gaussian; tensor-grid quadrature of the density.
        let mut rng = SeededRng::new(5, 1);
        let m = DMatrix::from_fn(3, 3, |_, _| rng.standard_normal() * 0.5);
        let cov = spd_from_square(&m);
        let mean = rng.standard_normal_vector(3);
        let measure = GaussianMeasure::new(mean.clone(), cov.clone()).unwrap();

        let nodes = 81;
        let half_width = 8.0;
        let sds: Vec<f64> = (0..3).map(|i| cov[(i, i)].sqrt()).collect();
        let step: Vec<f64> = sds.iter().map(|s| 2.0 * half_width * s / (nodes - 1) as f64).collect();
        let mut total = 0.0;
        let mut point = DVector::zeros(3);
        for i in 0..nodes {
            for j in 0..nodes {
                for k in 0..nodes {
                    let idx = [i, j, k];
                    let mut w = 1.0;
                    for (axis, &id) in idx.iter().enumerate() {
                        point[axis] = mean[axis] - half_width * sds[axis]
                            + id as f64 * step[axis];
                        w *= if id == 0 || id == nodes - 1 { 0.5 } else { 1.0 } * step[axis];
                    }
                    total += w * measure.density(&point).unwrap();
                }
            }
        }
        assert!((total - 1.0).abs() <= 1e-3, "grid mass {total}");
    }

    #[test]
    fn hellinger_identical_measures_is_zero() {
        let measure = GaussianMeasure::standard(3);
        assert_eq!(hellinger_gaussian(&measure, &measure).unwrap(), 0.0);
    }

    #[test]
    fn hellinger_mean_shift_closed_form() {
        let a = GaussianMeasure::standard(1);
        let b = GaussianMeasure::new(DVector::from_vec(vec![1.0]), DMatrix::identity(1, 1)).unwrap();
        let expected = (1.0 - (-1.0_f64 / 8.0).exp()).sqrt();
        assert_relative_eq!(hellinger_gaussian(&a, &b).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn hellinger_singular_limit_tends_to_one() {
        let a = GaussianMeasure::standard(1);
        let b =
            GaussianMeasure::new(DVector::zeros(1), DMatrix::identity(1, 1) * 1e12).unwrap();
        assert!(hellinger_gaussian(&a, &b).unwrap() > 0.99);
    }

    #[test]
    fn hellinger_matches_one_dimensional_quadrature() {
        // Trapezoidal quadrature of (1/2) Integral (sqrt p - sqrt q)^2 over [-50, 50].
        let a = GaussianMeasure::new(DVector::from_vec(vec![0.3]), DMatrix::identity(1, 1) * 1.7)
            .unwrap();
        let b = GaussianMeasure::new(DVector::from_vec(vec![-1.1]), DMatrix::identity(1, 1) * 0.6)
            .unwrap();
        let nodes = 100_000;
        let (lo, hi) = (-50.0, 50.0);
        let step = (hi - lo) / (nodes - 1) as f64;
        let mut acc = 0.0;
        for i in 0..nodes {
            let x = DVector::from_vec(vec![lo + i as f64 * step]);
            let diff = a.density(&x).unwrap().sqrt() - b.density(&x).unwrap().sqrt();
            let w = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
            acc += w * diff * diff * step;
        }
        let quadrature = (0.5 * acc).sqrt();
        let closed = hellinger_gaussian(&a, &b).unwrap();
        assert!((quadrature - closed).abs() < 1e-6, "{quadrature} vs {closed}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn hellinger_is_symmetric_bounded_and_triangular(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed, 0);
            let make = |rng: &mut SeededRng| {
                let m = DMatrix::from_fn(2, 2, |_, _| rng.standard_normal());
                GaussianMeasure::new(
                    rng.standard_normal_vector(2),
                    m.transpose() * &m + DMatrix::identity(2, 2) * 0.1,
                ).unwrap()
            };
            let (a, b, c) = (make(&mut rng), make(&mut rng), make(&mut rng));
            let dab = hellinger_gaussian(&a, &b).unwrap();
            let dba = hellinger_gaussian(&b, &a).unwrap();
            let dac = hellinger_gaussian(&a, &c).unwrap();
            let dbc = hellinger_gaussian(&b, &c).unwrap();
            prop_assert!((dab - dba).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&dab));
            prop_assert!(hellinger_gaussian(&a, &a).unwrap() <= 1e-12);
            prop_assert!(dac <= dab + dbc + 1e-10);
        }
    }
}
