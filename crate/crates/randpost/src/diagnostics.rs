//! Chain and posterior comparison utilities.
//!
//! Empirical moments with their Monte Carlo error bars, moment errors
//! against analytic references, trapezoidal tensor-grid Hellinger distances
//! for densities that have no closed form, and log-log rate fitting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::GaussianMeasure;

/// Euclidean mean error and Frobenius covariance error against a reference.
#[derive(Debug, Clone)]
pub struct MomentError {
    pub mean_error: f64,
    pub cov_error: f64,
    /// Which analytic posterior served as the reference.
    pub reference: String,
}

/// Least-squares fit of `log y` against `log x`.
#[derive(Debug, Clone)]
pub struct RateFit {
    pub abscissae: Vec<f64>,
    pub ordinates: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Sample mean and sample covariance (`1/(n-1)` normalization) of a state
/// matrix with one state per row.
pub fn empirical_moments(states: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = states.nrows();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "moments need >= 2 states, got {n}"
        )));
    }
    let mean = states.row_mean().transpose();
    let mut centered = states.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Moment errors of a sample against a reference Gaussian: Euclidean norm
/// for the mean, Frobenius norm for the covariance.
pub fn moment_error(
    states: &DMatrix<f64>,
    reference: &GaussianMeasure,
    label: &str,
) -> Result<MomentError> {
    if states.ncols() != reference.dim() {
        return Err(Error::DimensionMismatch {
            expected: reference.dim(),
            actual: states.ncols(),
        });
    }
    let (mean, cov) = empirical_moments(states)?;
    Ok(MomentError {
        mean_error: (mean - reference.mean()).norm(),
        cov_error: (cov - reference.covariance()).norm(),
        reference: label.to_string(),
    })
}

/// Integrated autocorrelation time of a scalar chain, estimated with the
/// adaptive window rule `k >= 6 tau(k)`.
pub fn integrated_autocorrelation_time(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 10 {
        return 1.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let gamma0 = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    if gamma0 <= 0.0 {
        return 1.0;
    }
    let mut tau = 1.0;
    let mut acc = 0.0;
    for k in 1..n / 2 {
        let mut g = 0.0;
        for i in 0..n - k {
            g += (series[i] - mean) * (series[i + k] - mean);
        }
        let rho = g / (n - k) as f64 / gamma0;
        acc += rho;
        tau = 1.0 + 2.0 * acc;
        if k as f64 >= 6.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}

/// Monte Carlo standard error of each coordinate mean,
/// `sqrt(tau_j var_j / n)` with the integrated autocorrelation time `tau_j`.
pub fn mean_standard_errors(states: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = states.nrows();
    if n < 10 {
        return Err(Error::InsufficientData(format!(
            "standard errors need >= 10 states, got {n}"
        )));
    }
    let mut out = DVector::zeros(states.ncols());
    for j in 0..states.ncols() {
        let column = states.column(j);
        let series = column.as_slice();
        let mean = series.iter().sum::<f64>() / n as f64;
        let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let tau = integrated_autocorrelation_time(series);
        out[j] = (tau * var / n as f64).sqrt();
    }
    Ok(out)
}

/// Standard error of the Frobenius-norm covariance estimate, by batch means:
/// the chain is split into `n_batches` contiguous batches, the covariance is
/// estimated per batch and the entrywise estimator variances are summed.
pub fn covariance_frobenius_standard_error(
    states: &DMatrix<f64>,
    n_batches: usize,
) -> Result<f64> {
    let n = states.nrows();
    let d = states.ncols();
    if n_batches < 2 || n / n_batches < d + 2 {
        return Err(Error::InsufficientData(format!(
            "batch means need >= 2 batches of >= d + 2 states each, got {n} states in {n_batches} batches"
        )));
    }
    let batch_len = n / n_batches;
    let mut sum = DMatrix::zeros(d, d);
    let mut sum_sq = DMatrix::zeros(d, d);
    for b in 0..n_batches {
        let block = states.rows(b * batch_len, batch_len).into_owned();
        let (_, cov) = empirical_moments(&block)?;
        sum += &cov;
        sum_sq += cov.component_mul(&cov);
    }
    let k = n_batches as f64;
    // Variance of the batch estimates, scaled down to the full-run estimator.
    let var_entries = (sum_sq / k - (&sum / k).component_mul(&(&sum / k))) * (k / (k - 1.0)) / k;
    Ok(var_entries.sum().max(0.0).sqrt())
}

/// Tensor product grid for trapezoidal quadrature in one or two dimensions.
#[derive(Debug, Clone)]
pub struct GridSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    nodes_per_axis: usize,
}

/// Tolerated deviation of a density's grid mass from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-3;

/// Default nodes per axis in one dimension.
pub const DEFAULT_NODES_1D: usize = 801;
/// Default nodes per axis in two dimensions.
pub const DEFAULT_NODES_2D: usize = 401;
/// Default half width of quadrature grids, in posterior standard deviations.
pub const DEFAULT_GRID_STD: f64 = 8.0;

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, nodes_per_axis: usize) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() || lower.len() > 2 {
            return Err(Error::UnsupportedDimension(lower.len()));
        }
        if nodes_per_axis < 3 {
            return Err(Error::InsufficientData(
                "grids need >= 3 nodes per axis".into(),
            ));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l >= u) {
            return Err(Error::InvalidArgument("grid bounds must satisfy lo < hi".into()));
        }
        Ok(Self {
            lower,
            upper,
            nodes_per_axis,
        })
    }

    /// A grid spanning `mean +- n_std` marginal standard deviations of a
    /// Gaussian along each axis.
    pub fn around(measure: &GaussianMeasure, n_std: f64, nodes_per_axis: usize) -> Result<Self> {
        let d = measure.dim();
        if d > 2 {
            return Err(Error::UnsupportedDimension(d));
        }
        let mut lower = Vec::with_capacity(d);
        let mut upper = Vec::with_capacity(d);
        for i in 0..d {
            let sd = measure.covariance()[(i, i)].sqrt();
            lower.push(measure.mean()[i] - n_std * sd);
            upper.push(measure.mean()[i] + n_std * sd);
        }
        Self::new(lower, upper, nodes_per_axis)
    }

    /// The default grid for a reference measure: 801 nodes per axis in one
    /// dimension, 401 in two, spanning eight standard deviations.
    pub fn default_around(measure: &GaussianMeasure) -> Result<Self> {
        let nodes = if measure.dim() == 1 {
            DEFAULT_NODES_1D
        } else {
            DEFAULT_NODES_2D
        };
        Self::around(measure, DEFAULT_GRID_STD, nodes)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.nodes_per_axis
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn step(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.nodes_per_axis - 1) as f64
    }

    /// Visits every node with its trapezoidal weight.
    pub fn for_each_node(&self, mut visit: impl FnMut(&[f64], f64)) {
        let n = self.nodes_per_axis;
        match self.dim() {
            1 => {
                let step = self.step(0);
                for i in 0..n {
                    let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 } * step;
                    visit(&[self.lower[0] + i as f64 * step], w);
                }
            }
            2 => {
                let (s0, s1) = (self.step(0), self.step(1));
                for i in 0..n {
                    let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 } * s0;
                    let x0 = self.lower[0] + i as f64 * s0;
                    for j in 0..n {
                        let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 } * s1;
                        visit(&[x0, self.lower[1] + j as f64 * s1], wi * wj);
                    }
                }
            }
            _ => unreachable!("GridSpec dimension is validated at construction"),
        }
    }
}

/// Hellinger distance `sqrt((1/2) Int (sqrt a - sqrt b)^2)` between two
/// Lebesgue densities by trapezoidal tensor quadrature.
///
/// Both densities must integrate to 1 on the grid within
/// [`NORMALIZATION_TOLERANCE`]; a mass defect means the grid does not cover
/// the distribution and is reported as [`Error::GridTooCoarse`] rather than
/// silently rescaled.
pub fn hellinger_quadrature(
    density_a: impl Fn(&[f64]) -> f64,
    density_b: impl Fn(&[f64]) -> f64,
    grid: &GridSpec,
) -> Result<f64> {
    let mut mass_a = 0.0;
    let mut mass_b = 0.0;
    let mut integral = 0.0;
    let mut negative = false;
    grid.for_each_node(|x, w| {
        let a = density_a(x);
        let b = density_b(x);
        if a < 0.0 || b < 0.0 {
            negative = true;
            return;
        }
        mass_a += w * a;
        mass_b += w * b;
        let diff = a.sqrt() - b.sqrt();
        integral += 0.5 * w * diff * diff;
    });
    if negative {
        return Err(Error::InvalidArgument(
            "densities must be nonnegative on the grid".into(),
        ));
    }
    for mass in [mass_a, mass_b] {
        if (mass - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::GridTooCoarse {
                mass,
                tolerance: NORMALIZATION_TOLERANCE,
            });
        }
    }
    Ok(integral.clamp(0.0, 1.0).sqrt())
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<RateFit> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "rate fit needs >= 3 pairs, got {}",
            pairs.len()
        )));
    }
    for &(x, y) in pairs {
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::NonPositiveValue(x));
        }
        if !(y > 0.0 && y.is_finite()) {
            return Err(Error::NonPositiveValue(y));
        }
    }
    let n = pairs.len() as f64;
    let logs: Vec<(f64, f64)> = pairs.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "rate fit needs at least two distinct abscissae".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = logs
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum();
    let ss_tot: f64 = logs.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(RateFit {
        abscissae: pairs.iter().map(|p| p.0).collect(),
        ordinates: pairs.iter().map(|p| p.1).collect(),
        slope,
        intercept,
        r_squared,
    })
}
