//! Forward-map contracts and the linear randomized instance.
//!
//! Samplers only see two callable contracts: a deterministic
//! [`ForwardModel`] and a [`RandomizedForwardModel`] that draws fresh
//! internal noise on every evaluation and can freeze one realization of
//! itself. The shipped implementation is the linear family
//! `u -> (A + hP) u + h xi`, `xi ~ N(0, Q)`, whose root-mean-square
//! deviation from `u -> A u` vanishes linearly in `h`;
//! [`estimate_ms_order`] measures that exponent empirically.

use nalgebra::{DMatrix, DVector};

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::gaussian::{cholesky, CholeskyFactor};
use crate::rng::SeededRng;

/// A deterministic parameter-to-observation map.
pub trait ForwardModel: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, u: &DVector<f64>) -> DVector<f64>;
}

/// A stochastic surrogate of a forward map.
///
/// `apply_randomized` draws fresh internal randomness on every call;
/// `freeze` fixes one realization of that randomness and returns the
/// resulting deterministic map.
pub trait RandomizedForwardModel: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply_randomized(&self, u: &DVector<f64>, rng: &mut SeededRng) -> DVector<f64>;
    fn freeze(&self, rng: &mut SeededRng) -> Box<dyn ForwardModel>;
}

/// The exact linear map `u -> A u`.
#[derive(Debug, Clone)]
pub struct LinearForwardMap {
    matrix_a: DMatrix<f64>,
}

impl LinearForwardMap {
    pub fn new(matrix_a: DMatrix<f64>) -> Result<Self> {
        if matrix_a.nrows() == 0 || matrix_a.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "forward map needs at least one row and one column".into(),
            ));
        }
        if matrix_a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "forward map matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { matrix_a })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix_a
    }
}

impl ForwardModel for LinearForwardMap {
    fn input_dim(&self) -> usize {
        self.matrix_a.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix_a.nrows()
    }

    fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        assert_eq!(u.len(), self.input_dim(), "dimension mismatch in apply");
        &self.matrix_a * u
    }
}

/// One frozen realization of a randomized linear map: `u -> M u + shift`.
#[derive(Debug, Clone)]
pub struct FrozenLinearMap {
    matrix: DMatrix<f64>,
    shift: DVector<f64>,
}

impl FrozenLinearMap {
    pub fn new(matrix: DMatrix<f64>, shift: DVector<f64>) -> Self {
        assert_eq!(matrix.nrows(), shift.len());
        Self { matrix, shift }
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }
}

impl ForwardModel for FrozenLinearMap {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.matrix * u + &self.shift
    }
}

/// The randomized linear map `u -> (A + hP) u + h xi`, `xi ~ N(0, Q)`.
///
/// `Q` may be positive semi-definite: validity is checked by factorizing
/// `Q + 1e-14 I`, and a singular-but-nonzero `Q` is sampled through that
/// jittered factor. An all-zero `Q` produces no noise at all.
#[derive(Debug, Clone)]
pub struct RandomizedLinearForwardMap {
    matrix_a: DMatrix<f64>,
    perturbation_p: DMatrix<f64>,
    noise_q: DMatrix<f64>,
    h: f64,
    effective: DMatrix<f64>,
    noise_factor: Option<CholeskyFactor>,
}

/// Jitter added to `Q` before factorization when `Q` is only PSD.
const Q_JITTER: f64 = 1e-14;

impl RandomizedLinearForwardMap {
    pub fn new(
        matrix_a: DMatrix<f64>,
        perturbation_p: DMatrix<f64>,
        noise_q: DMatrix<f64>,
        h: f64,
    ) -> Result<Self> {
        if perturbation_p.shape() != matrix_a.shape() {
            return Err(Error::InvalidArgument(format!(
                "perturbation shape {:?} does not match forward matrix shape {:?}",
                perturbation_p.shape(),
                matrix_a.shape()
            )));
        }
        let m = matrix_a.nrows();
        if noise_q.shape() != (m, m) {
            return Err(Error::InvalidArgument(format!(
                "noise covariance shape {:?}, expected {}x{}",
                noise_q.shape(),
                m,
                m
            )));
        }
        if !h.is_finite() || h < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "discretization parameter must be finite and >= 0, got {h}"
            )));
        }
        let noise_factor = if noise_q.iter().all(|&v| v == 0.0) {
            None
        } else {
            match cholesky(&noise_q) {
                Ok(f) => Some(f),
                Err(Error::NotPositiveDefinite) => {
                    let jittered = &noise_q + DMatrix::identity(m, m) * Q_JITTER;
                    Some(cholesky(&jittered)?)
                }
                Err(e) => return Err(e),
            }
        };
        let effective = &matrix_a + &perturbation_p * h;
        Ok(Self {
            matrix_a,
            perturbation_p,
            noise_q,
            h,
            effective,
            noise_factor,
        })
    }

    pub fn matrix_a(&self) -> &DMatrix<f64> {
        &self.matrix_a
    }

    pub fn perturbation(&self) -> &DMatrix<f64> {
        &self.perturbation_p
    }

    pub fn noise_covariance(&self) -> &DMatrix<f64> {
        &self.noise_q
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// `A_h = A + h P`.
    pub fn effective_matrix(&self) -> &DMatrix<f64> {
        &self.effective
    }

    /// One draw `xi ~ N(0, Q)`.
    pub fn draw_noise(&self, rng: &mut SeededRng) -> DVector<f64> {
        match &self.noise_factor {
            Some(factor) => factor.transform(&rng.standard_normal_vector(self.output_dim())),
            None => DVector::zeros(self.output_dim()),
        }
    }

    /// The deterministic map `u -> A_h u + h xi` for a given `xi`.
    pub fn freeze_with(&self, xi: &DVector<f64>) -> FrozenLinearMap {
        FrozenLinearMap::new(self.effective.clone(), xi * self.h)
    }
}

impl RandomizedForwardModel for RandomizedLinearForwardMap {
    fn input_dim(&self) -> usize {
        self.matrix_a.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix_a.nrows()
    }

    fn apply_randomized(&self, u: &DVector<f64>, rng: &mut SeededRng) -> DVector<f64> {
        assert_eq!(u.len(), self.input_dim(), "dimension mismatch in apply_randomized");
        let mut out = &self.effective * u;
        if self.h > 0.0 {
            if let Some(factor) = &self.noise_factor {
                out += factor.transform(&rng.standard_normal_vector(self.output_dim())) * self.h;
            }
        }
        out
    }

    fn freeze(&self, rng: &mut SeededRng) -> Box<dyn ForwardModel> {
        Box::new(self.freeze_with(&self.draw_noise(rng)))
    }
}

/// Root-mean-square errors of a randomized family against the exact map,
/// with the fitted log-log slope (the empirical mean-square order).
#[derive(Debug, Clone)]
pub struct MsOrderEstimate {
    pub h_values: Vec<f64>,
    pub rms_errors: Vec<f64>,
    pub fitted_slope: f64,
}

/// Estimates the mean-square order of a randomized family.
///
/// For each `h` the squared error `|G(u) - G_h(u)|^2` is averaged over
/// `samples_per_h` draws and maximized over the test points; the slope is
/// the least-squares fit of `log rms` against `log h`. Families with zero
/// error (exact maps) make the fit fail with a non-positive-value error.
pub fn estimate_ms_order<F>(
    map_family: F,
    exact: &LinearForwardMap,
    test_points: &[DVector<f64>],
    h_values: &[f64],
    samples_per_h: usize,
    rng: &SeededRng,
) -> Result<MsOrderEstimate>
where
    F: Fn(f64) -> RandomizedLinearForwardMap,
{
    if h_values.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "mean-square order estimation needs >= 3 h values, got {}",
            h_values.len()
        )));
    }
    if test_points.is_empty() {
        return Err(Error::InsufficientData("no test points".into()));
    }
    if samples_per_h == 0 {
        return Err(Error::InsufficientData("samples_per_h must be >= 1".into()));
    }
    let mut h_sorted: Vec<f64> = h_values.to_vec();
    h_sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite h values"));
    h_sorted.dedup();
    if h_sorted.len() != h_values.len() {
        return Err(Error::InvalidArgument("h values must be distinct".into()));
    }

    let mut rms_errors = Vec::with_capacity(h_sorted.len());
    for (hi, &h) in h_sorted.iter().enumerate() {
        let map = map_family(h);
        let mut worst = 0.0_f64;
        for (pi, u) in test_points.iter().enumerate() {
            let reference = exact.apply(u);
            let mut rng_point = rng.derive(&[hi as u64, pi as u64]);
            let mut acc = 0.0;
            for _ in 0..samples_per_h {
                let diff = map.apply_randomized(u, &mut rng_point) - &reference;
                acc += diff.norm_squared();
            }
            worst = worst.max(acc / samples_per_h as f64);
        }
        rms_errors.push(worst.sqrt());
    }

    let pairs: Vec<(f64, f64)> = h_sorted.iter().copied().zip(rms_errors.iter().copied()).collect();
    let fit = diagnostics::fit_rate(&pairs)?;
    Ok(MsOrderEstimate {
        h_values: h_sorted,
        rms_errors,
        fitted_slope: fit.slope,
    })
}
