//! Gaussian mixture densities over the stacked `[power_1..power_M, forecast_1..forecast_M]`
//! vector, the block view of each covariance, and the conditional distribution of a
//! farm's forecast error given the public forecast vector.
//!
//! All densities are evaluated in log space through a Cholesky factor; explicit
//! inverses only appear where a caller needs the precision matrix itself.
//!
//! The conditional weights need `N(y0; mu_y, C)`, whose exponent is a quadratic form
//! that splits over farms the same way the E-step Mahalanobis term does. Because `y0`
//! is public here, it is evaluated locally rather than through the secure summation.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

/// Numerically stable `ln(sum(exp(values)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Standard normal CDF evaluated at `(x - mean) / sqrt(var)`.
pub fn normal_cdf(x: f64, mean: f64, var: f64) -> f64 {
    0.5 * libm::erfc(-(x - mean) / (2.0 * var).sqrt())
}

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    (-0.5 * (LN_2PI + var.ln() + d * d / var)).exp()
}

/// A Gaussian with its covariance factored once, for repeated evaluation.
#[derive(Clone, Debug)]
pub struct GaussianFactor {
    mean: DVector<f64>,
    lower: DMatrix<f64>,
    log_det: f64,
}

impl GaussianFactor {
    /// Factors `cov`; `component` only labels the error.
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>, component: usize) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!(
                "mean has length {d} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { component })?;
        let lower = chol.l();
        let log_det = 2.0 * lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite { component });
        }
        Ok(Self {
            mean: mean.clone(),
            lower,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `(x - mean)^T cov^{-1} (x - mean)` by forward substitution.
    pub fn mahalanobis(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        let mut y = vec![0.0; d];
        let mut acc = 0.0;
        for i in 0..d {
            let mut v = x[i] - self.mean[i];
            for (k, yk) in y.iter().enumerate().take(i) {
                v -= self.lower[(i, k)] * yk;
            }
            v /= self.lower[(i, i)];
            y[i] = v;
            acc += v * v;
        }
        acc
    }

    /// Log density given an already computed Mahalanobis term.
    pub fn logpdf_from_mahalanobis(&self, maha: f64) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + maha)
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        self.logpdf_from_mahalanobis(self.mahalanobis(x))
    }

    /// Precision matrix `cov^{-1}`, assembled from the factor.
    pub fn precision(&self) -> DMatrix<f64> {
        let d = self.dim();
        let linv = self
            .lower
            .clone()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("cholesky factor has a positive diagonal");
        let p = linv.transpose() * linv;
        (&p + p.transpose()) * 0.5
    }
}

/// `ln N(x | mean, cov)` via a Cholesky factorization.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() {
        return Err(Error::Dimension(format!(
            "point has length {} but mean has length {}",
            x.len(),
            mean.len()
        )));
    }
    let factor = GaussianFactor::new(&DVector::from_column_slice(mean), cov, 0)?;
    Ok(factor.logpdf(x))
}

/// Weights, means and covariances of a `J`-component mixture.
///
/// For the joint wind model the dimension is `2M`: entries `0..M` are powers and
/// `M..2M` forecasts, so each covariance splits into blocks `[[A, B], [B^T, C]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmRecord", into = "GmmRecord")]
pub struct GmmParams {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct GmmRecord {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

impl From<GmmParams> for GmmRecord {
    fn from(p: GmmParams) -> Self {
        GmmRecord {
            weights: p.weights,
            means: p
                .means
                .iter()
                .map(|m| m.iter().copied().collect())
                .collect(),
            covariances: p
                .covariances
                .iter()
                .map(|c| {
                    (0..c.nrows())
                        .map(|r| c.row(r).iter().copied().collect())
                        .collect()
                })
                .collect(),
        }
    }
}

impl TryFrom<GmmRecord> for GmmParams {
    type Error = Error;

    fn try_from(r: GmmRecord) -> Result<Self> {
        let means = r.means.into_iter().map(DVector::from_vec).collect();
        let mut covs = Vec::with_capacity(r.covariances.len());
        for rows in r.covariances {
            let d = rows.len();
            if rows.iter().any(|row| row.len() != d) {
                return Err(Error::Dimension("covariance rows are ragged".into()));
            }
            covs.push(DMatrix::from_fn(d, d, |i, k| rows[i][k]));
        }
        GmmParams::new(r.weights, means, covs)
    }
}

impl GmmParams {
    /// Builds and validates a mixture: weights on the simplex, symmetric positive
    /// definite covariances, consistent dimensions.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let j = weights.len();
        if j == 0 {
            return Err(Error::InvalidInput(
                "a mixture needs at least one component".into(),
            ));
        }
        if means.len() != j || covariances.len() != j {
            return Err(Error::Dimension(format!(
                "{j} weights, {} means, {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "weights sum to {total}, not 1"
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::Dimension("zero-dimensional mixture".into()));
        }
        for (c, (m, s)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != d || s.nrows() != d || s.ncols() != d {
                return Err(Error::Dimension(format!(
                    "component {c} does not have dimension {d}"
                )));
            }
            if m.iter().chain(s.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "component {c} has non-finite entries"
                )));
            }
            for r in 0..d {
                for k in (r + 1)..d {
                    if (s[(r, k)] - s[(k, r)]).abs() > SYMMETRY_TOL {
                        return Err(Error::InvalidInput(format!(
                            "covariance {c} is not symmetric at ({r},{k})"
                        )));
                    }
                }
            }
            if s.clone().cholesky().is_none() {
                return Err(Error::NotPositiveDefinite { component: c });
            }
        }
        Ok(Self {
            weights,
            means,
            covariances,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Number of farms `M`; fails for odd dimensions.
    pub fn farms(&self) -> Result<usize> {
        let d = self.dim();
        if !d.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "dimension {d} is odd; the joint wind model has 2M dimensions"
            )));
        }
        Ok(d / 2)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn mean(&self, j: usize) -> &DVector<f64> {
        &self.means[j]
    }

    pub fn covariance(&self, j: usize) -> &DMatrix<f64> {
        &self.covariances[j]
    }

    /// `sigma_{j,r,c}`.
    pub fn sigma(&self, j: usize, r: usize, c: usize) -> f64 {
        self.covariances[j][(r, c)]
    }

    pub fn mean_x(&self, j: usize) -> Result<DVector<f64>> {
        let m = self.farms()?;
        Ok(self.means[j].rows(0, m).into_owned())
    }

    pub fn mean_y(&self, j: usize) -> Result<DVector<f64>> {
        let m = self.farms()?;
        Ok(self.means[j].rows(m, m).into_owned())
    }

    pub fn block_a(&self, j: usize) -> Result<DMatrix<f64>> {
        let m = self.farms()?;
        Ok(self.covariances[j].view((0, 0), (m, m)).into_owned())
    }

    /// Power-forecast cross covariance, the top-right block.
    pub fn block_b(&self, j: usize) -> Result<DMatrix<f64>> {
        let m = self.farms()?;
        Ok(self.covariances[j].view((0, m), (m, m)).into_owned())
    }

    /// Forecast covariance, the bottom-right block.
    pub fn block_c(&self, j: usize) -> Result<DMatrix<f64>> {
        let m = self.farms()?;
        Ok(self.covariances[j].view((m, m), (m, m)).into_owned())
    }

    /// Row `m` of `B_j`.
    pub fn b_row(&self, j: usize, m: usize) -> Result<DVector<f64>> {
        Ok(self.block_b(j)?.row(m).transpose())
    }

    /// Mixture restricted to the coordinates in `dims` (marginalization keeps weights
    /// and selects the matching mean entries and covariance sub-block).
    pub fn marginal(&self, dims: &[usize]) -> Result<GmmParams> {
        let d = self.dim();
        if dims.is_empty() || dims.iter().any(|&k| k >= d) {
            return Err(Error::Dimension(format!(
                "marginal dims {dims:?} out of range 0..{d}"
            )));
        }
        let k = dims.len();
        let means = self
            .means
            .iter()
            .map(|m| DVector::from_fn(k, |i, _| m[dims[i]]))
            .collect();
        let covs = self
            .covariances
            .iter()
            .map(|s| DMatrix::from_fn(k, k, |a, b| s[(dims[a], dims[b])]))
            .collect();
        GmmParams::new(self.weights.clone(), means, covs)
    }

    pub fn factors(&self) -> Result<Vec<GaussianFactor>> {
        self.means
            .iter()
            .zip(&self.covariances)
            .enumerate()
            .map(|(j, (m, s))| GaussianFactor::new(m, s, j))
            .collect()
    }

    pub fn evaluator(&self) -> Result<MixtureEvaluator> {
        MixtureEvaluator::new(self)
    }
}

/// Cached factors for evaluating one mixture many times.
#[derive(Clone, Debug)]
pub struct MixtureEvaluator {
    log_weights: Vec<f64>,
    factors: Vec<GaussianFactor>,
}

impl MixtureEvaluator {
    pub fn new(params: &GmmParams) -> Result<Self> {
        Ok(Self {
            log_weights: params.weights.iter().map(|w| w.ln()).collect(),
            factors: params.factors()?,
        })
    }

    pub fn dim(&self) -> usize {
        self.factors[0].dim()
    }

    /// Per-component `ln w_j + ln N_j(x)` written into `out`.
    pub fn joint_log_terms(&self, x: &[f64], out: &mut [f64]) {
        for (j, f) in self.factors.iter().enumerate() {
            out[j] = self.log_weights[j] + f.logpdf(x);
        }
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let mut terms = vec![0.0; self.factors.len()];
        self.joint_log_terms(x, &mut terms);
        log_sum_exp(&terms)
    }
}

fn check_point(x: &[f64], params: &GmmParams) -> Result<()> {
    if x.len() != params.dim() {
        return Err(Error::Dimension(format!(
            "point has length {} but mixture has dimension {}",
            x.len(),
            params.dim()
        )));
    }
    Ok(())
}

pub fn mixture_logpdf(x: &[f64], params: &GmmParams) -> Result<f64> {
    check_point(x, params)?;
    Ok(params.evaluator()?.logpdf(x))
}

/// `sum_j w_j N(x | mu_j, Sigma_j)`, accumulated with a max shift in log space.
pub fn mixture_pdf(x: &[f64], params: &GmmParams) -> Result<f64> {
    Ok(mixture_logpdf(x, params)?.exp())
}

/// Conditional distribution of farm `m`'s forecast error `z = x_m - y_m` given the
/// forecast vector `Y = y0`: a univariate mixture with weights `alpha`, power means
/// `lambda` and variances `delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalErrorDist {
    pub node: usize,
    /// `y0_m`, the farm's own forecast; the error mean of component `j` is `lambda_j - y0_m`.
    pub forecast: f64,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl ConditionalErrorDist {
    pub fn error_mean(&self, j: usize) -> f64 {
        self.means[j] - self.forecast
    }

    pub fn pdf(&self, z: f64) -> f64 {
        (0..self.weights.len())
            .map(|j| self.weights[j] * normal_pdf(z, self.error_mean(j), self.variances[j]))
            .sum()
    }

    pub fn cdf(&self, z: f64) -> f64 {
        (0..self.weights.len())
            .map(|j| self.weights[j] * normal_cdf(z, self.error_mean(j), self.variances[j]))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        (0..self.weights.len())
            .map(|j| self.weights[j] * self.error_mean(j))
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        (0..self.weights.len())
            .map(|j| {
                let d = self.error_mean(j) - mu;
                self.weights[j] * (self.variances[j] + d * d)
            })
            .sum()
    }
}

/// Normalizes `w_j * exp(log_density_j)` without forming raw densities.
pub(crate) fn conditional_alpha(weights: &[f64], log_densities: &[f64]) -> Vec<f64> {
    let terms: Vec<f64> = weights
        .iter()
        .zip(log_densities)
        .map(|(w, l)| w.ln() + l)
        .collect();
    let norm = log_sum_exp(&terms);
    terms.iter().map(|t| (t - norm).exp()).collect()
}

/// Derives farm `m`'s (zero-based) forecast-error distribution given forecasts `y0`.
pub fn derive_conditional(
    params: &GmmParams,
    m: usize,
    y0: &[f64],
) -> Result<ConditionalErrorDist> {
    let farms = params.farms()?;
    if m >= farms {
        return Err(Error::Dimension(format!(
            "farm index {m} out of range 0..{farms}"
        )));
    }
    if y0.len() != farms {
        return Err(Error::Dimension(format!(
            "forecast vector has length {} but there are {farms} farms",
            y0.len()
        )));
    }
    let y0v = DVector::from_column_slice(y0);
    let j_count = params.components();
    let mut log_dens = Vec::with_capacity(j_count);
    let mut means = Vec::with_capacity(j_count);
    let mut variances = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let c = params.block_c(j)?;
        let mu_y = params.mean_y(j)?;
        let chol = c
            .clone()
            .cholesky()
            .ok_or(Error::Conditioning { component: j })?;
        let factor =
            GaussianFactor::new(&mu_y, &c, j).map_err(|_| Error::Conditioning { component: j })?;
        log_dens.push(factor.logpdf(y0));

        let b = params.b_row(j, m)?;
        // C^{-1} b^T; C is symmetric so this also serves as (b C^{-1})^T.
        let cinv_b = chol.solve(&b);
        let lambda = params.mean(j)[m] + cinv_b.dot(&(&y0v - &mu_y));
        let delta = params.sigma(j, m, m) - cinv_b.dot(&b);
        if delta.is_nan() || delta <= 0.0 {
            return Err(Error::Conditioning { component: j });
        }
        means.push(lambda);
        variances.push(delta);
    }
    Ok(ConditionalErrorDist {
        node: m,
        forecast: y0[m],
        weights: conditional_alpha(params.weights(), &log_dens),
        means,
        variances,
    })
}

/// Draws `n` i.i.d. rows; row `r` of the result is one observation.
pub fn sample(params: &GmmParams, n: usize, seed: u64) -> DMatrix<f64> {
    let d = params.dim();
    let mut out = DMatrix::zeros(n, d);
    if n == 0 {
        return out;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let pick = WeightedIndex::new(params.weights()).expect("validated weights");
    let lowers: Vec<DMatrix<f64>> = params
        .covariances()
        .iter()
        .map(|c| c.clone().cholesky().expect("validated covariance").l())
        .collect();
    let mut z = DVector::zeros(d);
    for r in 0..n {
        let j = pick.sample(&mut rng);
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let x = params.mean(j) + &lowers[j] * &z;
        out.row_mut(r).copy_from(&x.transpose());
    }
    out
}

/// Free parameters of a full-covariance mixture: `J-1 + J*D + J*D(D+1)/2`.
pub fn free_parameters(components: usize, dim: usize) -> usize {
    components - 1 + components * dim + components * dim * (dim + 1) / 2
}

pub fn log_likelihood(params: &GmmParams, data: &DMatrix<f64>) -> Result<f64> {
    if data.ncols() != params.dim() {
        return Err(Error::Dimension(format!(
            "data has {} columns, mixture has dimension {}",
            data.ncols(),
            params.dim()
        )));
    }
    let eval = params.evaluator()?;
    let mut row = vec![0.0; data.ncols()];
    let mut total = 0.0;
    for r in 0..data.nrows() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = data[(r, k)];
        }
        total += eval.logpdf(&row);
    }
    Ok(total)
}

/// Bayesian information criterion `-2 ln L + k ln N`.
pub fn bic(params: &GmmParams, data: &DMatrix<f64>) -> Result<f64> {
    let ll = log_likelihood(params, data)?;
    let k = free_parameters(params.components(), params.dim()) as f64;
    Ok(-2.0 * ll + k * (data.nrows() as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    /// Dense Gauss-Jordan inverse with partial pivoting; test oracle only.
    fn gauss_jordan_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut m = a.clone();
        let mut inv = DMatrix::<f64>::identity(n, n);
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| m[(x, col)].abs().partial_cmp(&m[(y, col)].abs()).unwrap())
                .unwrap();
            m.swap_rows(col, piv);
            inv.swap_rows(col, piv);
            let p = m[(col, col)];
            for k in 0..n {
                m[(col, k)] /= p;
                inv[(col, k)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = m[(r, col)];
                    for k in 0..n {
                        m[(r, k)] -= f * m[(col, k)];
                        inv[(r, k)] -= f * inv[(col, k)];
                    }
                }
            }
        }
        inv
    }

    fn naive_density(x: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let d = mean.len();
        let inv = gauss_jordan_inverse(cov);
        let diff = DVector::from_column_slice(x) - mean;
        let q = (diff.transpose() * inv * &diff)[(0, 0)];
        let det = cov.determinant();
        (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(d as i32) * det).sqrt()
    }

    pub(crate) fn random_spd(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let s = &a * a.transpose() + DMatrix::identity(d, d) * 0.3;
        (&s + s.transpose()) * 0.5
    }

    fn random_params(j: usize, d: usize, rng: &mut impl Rng) -> GmmParams {
        let raw: Vec<f64> = (0..j).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let rest: f64 = w[1..].iter().sum();
        w[0] = 1.0 - rest;
        let means = (0..j)
            .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0)))
            .collect();
        let covs = (0..j).map(|_| random_spd(d, rng)).collect();
        GmmParams::new(w, means, covs).unwrap()
    }

    #[test]
    fn logpdf_at_mean_of_standard_bivariate() {
        let v = gaussian_logpdf(&[0.3, -0.1], &[0.3, -0.1], &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(
            v,
            (1.0 / (2.0 * std::f64::consts::PI)).ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn logpdf_standard_normal_at_one() {
        let v = gaussian_logpdf(&[1.0], &[0.0], &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_relative_eq!(
            v,
            -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn logpdf_matches_gauss_jordan_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..20 {
            let cov = random_spd(4, &mut rng);
            let mean = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = gaussian_logpdf(&x, mean.as_slice(), &cov).unwrap().exp();
            let want = naive_density(&x, &mean, &cov);
            assert_relative_eq!(got, want, max_relative = 1e-10);
        }
    }

    #[test]
    fn logpdf_rejects_indefinite_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = gaussian_logpdf(&[0.0, 0.0], &[0.0, 0.0], &cov).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { component: 0 }));
    }

    #[test]
    fn params_validation() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let mu = DVector::zeros(2);
        assert!(GmmParams::new(
            vec![0.5, 0.4],
            vec![mu.clone(), mu.clone()],
            vec![eye.clone(), eye.clone()]
        )
        .is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]);
        assert!(GmmParams::new(vec![1.0], vec![mu.clone()], vec![asym]).is_err());
        let p = GmmParams::new(vec![1.0], vec![mu], vec![eye]).unwrap();
        assert_eq!(p.farms().unwrap(), 1);
    }

    #[test]
    fn block_accessors_follow_layout() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let p = random_params(2, 6, &mut rng);
        for j in 0..2 {
            let s = p.covariance(j);
            let b = p.block_b(j).unwrap();
            let c = p.block_c(j).unwrap();
            for r in 0..3 {
                for k in 0..3 {
                    assert_eq!(b[(r, k)], s[(r, 3 + k)]);
                    assert_eq!(c[(r, k)], s[(3 + r, 3 + k)]);
                }
                assert_eq!(p.b_row(j, r).unwrap()[1], p.sigma(j, r, 4));
            }
            assert_eq!(p.mean_y(j).unwrap()[0], p.mean(j)[3]);
        }
    }

    #[test]
    fn single_component_mixture_is_the_gaussian() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let p = random_params(1, 3, &mut rng);
        let x = [0.1, 0.2, -0.3];
        let direct = gaussian_logpdf(&x, p.mean(0).as_slice(), p.covariance(0))
            .unwrap()
            .exp();
        assert_relative_eq!(mixture_pdf(&x, &p).unwrap(), direct, max_relative = 1e-14);
    }

    #[test]
    fn identical_components_equal_either_density() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let mu = DVector::from_vec(vec![0.2, -0.4]);
        let p = GmmParams::new(
            vec![0.5, 0.5],
            vec![mu.clone(), mu.clone()],
            vec![cov.clone(), cov.clone()],
        )
        .unwrap();
        let x = [1.0, 0.0];
        let single = gaussian_logpdf(&x, mu.as_slice(), &cov).unwrap().exp();
        assert_relative_eq!(mixture_pdf(&x, &p).unwrap(), single, max_relative = 1e-14);
    }

    /// Composite Simpson quadrature; oracle for 1-D mass checks.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn monte_carlo_box_mass_matches_quadrature_on_marginal() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let p = random_params(3, 2, &mut rng);
        let marg = p.marginal(&[0]).unwrap();
        let (lo, hi) = (-1.0, 1.5);
        let quad = simpson(|x| mixture_pdf(&[x], &marg).unwrap(), lo, hi, 2000);
        let draws = sample(&p, 400_000, 99);
        let inside = (0..draws.nrows())
            .filter(|&r| draws[(r, 0)] >= lo && draws[(r, 0)] <= hi)
            .count();
        let mc = inside as f64 / draws.nrows() as f64;
        assert!((mc - quad).abs() < 3e-3, "mc {mc} quad {quad}");
        let analytic: f64 = (0..3)
            .map(|j| {
                let (m, v) = (marg.mean(j)[0], marg.covariance(j)[(0, 0)]);
                marg.weights()[j] * (normal_cdf(hi, m, v) - normal_cdf(lo, m, v))
            })
            .sum();
        assert!((analytic - quad).abs() < 1e-3);
    }

    #[test]
    fn conditional_independent_blocks_collapse() {
        let cov = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.5, 0.1, 0.0, 0.0, 0.1, 0.4, 0.0, 0.0, 0.0, 0.0, 0.3, 0.05, 0.0, 0.0, 0.05, 0.2,
            ],
        );
        let mu = DVector::from_vec(vec![0.4, 0.6, 0.45, 0.55]);
        let p = GmmParams::new(vec![1.0], vec![mu], vec![cov]).unwrap();
        let c = derive_conditional(&p, 1, &[0.9, 0.1]).unwrap();
        assert_eq!(c.weights, vec![1.0]);
        assert_relative_eq!(c.means[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(c.variances[0], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn conditional_bivariate_textbook() {
        let rho = 0.8;
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let p = GmmParams::new(
            vec![1.0],
            vec![DVector::from_vec(vec![0.3, 0.5])],
            vec![cov],
        )
        .unwrap();
        let y0 = 1.2;
        let c = derive_conditional(&p, 0, &[y0]).unwrap();
        assert_relative_eq!(c.means[0], 0.3 + rho * (y0 - 0.5), epsilon = 1e-14);
        assert_relative_eq!(c.variances[0], 1.0 - rho * rho, epsilon = 1e-14);
        assert_relative_eq!(c.error_mean(0), c.means[0] - y0);
    }

    #[test]
    fn conditional_matches_rejection_sampling() {
        // Samples whose forecasts land near y0 approximate the conditional law; compare
        // the error CDF in sup norm.
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mk = |rng: &mut ChaCha20Rng, shift: f64| {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.3..0.3));
            let s = &a * a.transpose() + DMatrix::identity(4, 4) * 0.05;
            (
                (&s + s.transpose()) * 0.5,
                DVector::from_fn(4, |_, _| shift + rng.gen_range(-0.1..0.1)),
            )
        };
        let (s0, m0) = mk(&mut rng, 0.0);
        let (s1, m1) = mk(&mut rng, 0.6);
        let p = GmmParams::new(vec![0.45, 0.55], vec![m0, m1], vec![s0, s1]).unwrap();
        let y0 = [0.35, 0.3];
        let cond = derive_conditional(&p, 0, &y0).unwrap();
        let draws = sample(&p, 3_000_000, 4);
        let mut errs = Vec::new();
        for r in 0..draws.nrows() {
            if (draws[(r, 2)] - y0[0]).abs() < 0.02 && (draws[(r, 3)] - y0[1]).abs() < 0.02 {
                errs.push(draws[(r, 0)] - y0[0]);
            }
        }
        assert!(errs.len() > 2000, "only {} accepted", errs.len());
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = errs.len() as f64;
        let sup = errs
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let c = cond.cdf(*z);
                (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(sup < 5e-2, "sup-norm {sup}");
    }

    #[test]
    fn conditional_rejects_bad_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let p = random_params(2, 4, &mut rng);
        assert!(matches!(
            derive_conditional(&p, 0, &[0.1]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            derive_conditional(&p, 2, &[0.1, 0.2]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn alpha_invariant_to_common_weight_scale() {
        let w = [0.2, 0.5, 0.3];
        let ld = [-3.0, -10.0, -1.5];
        let a = conditional_alpha(&w, &ld);
        let scaled: Vec<f64> = w.iter().map(|v| v * 17.5).collect();
        let b = conditional_alpha(&scaled, &ld);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-15);
        }
        assert_relative_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sample_edge_cases() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let p = random_params(2, 3, &mut rng);
        assert_eq!(sample(&p, 0, 1).nrows(), 0);
        assert_eq!(sample(&p, 50, 9), sample(&p, 50, 9));
        assert_ne!(sample(&p, 50, 9), sample(&p, 50, 10));
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let mu = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let p = GmmParams::new(vec![1.0], vec![mu.clone()], vec![DMatrix::identity(3, 3)]).unwrap();
        let n = 20_000;
        let s = sample(&p, n, 77);
        for k in 0..3 {
            let m = s.column(k).mean();
            assert!((m - mu[k]).abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn marginal_of_samples_matches_analytic_marginal() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let p = random_params(2, 4, &mut rng);
        let marg = p.marginal(&[2]).unwrap();
        let s = sample(&p, 100_000, 5);
        let mean_an: f64 = (0..2).map(|j| marg.weights()[j] * marg.mean(j)[0]).sum();
        let var_an: f64 = (0..2)
            .map(|j| marg.weights()[j] * (marg.covariance(j)[(0, 0)] + marg.mean(j)[0].powi(2)))
            .sum::<f64>()
            - mean_an * mean_an;
        let col = s.column(2);
        let m = col.mean();
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
        assert!((m - mean_an).abs() < 4.0 * (var_an / 1e5).sqrt());
        assert!((v - var_an).abs() / var_an < 0.03);
    }

    #[test]
    fn bic_parameter_count_and_penalty() {
        // D = 2M; J=1 gives 0 + 2M + M(2M+1).
        for m in 1..5 {
            assert_eq!(free_parameters(1, 2 * m), 2 * m + m * (2 * m + 1));
        }
        let p = GmmParams::new(
            vec![1.0],
            vec![DVector::zeros(2)],
            vec![DMatrix::identity(2, 2)],
        )
        .unwrap();
        let one = DMatrix::from_row_slice(1, 2, &[0.3, -0.2]);
        assert!(bic(&p, &one).unwrap().is_finite());

        let d1 = sample(&p, 40, 1);
        let d2 = DMatrix::from_fn(80, 2, |r, c| d1[(r % 40, c)]);
        let k = free_parameters(1, 2) as f64;
        let pen1 = bic(&p, &d1).unwrap() + 2.0 * log_likelihood(&p, &d1).unwrap();
        let pen2 = bic(&p, &d2).unwrap() + 2.0 * log_likelihood(&p, &d2).unwrap();
        assert_relative_eq!(pen2 - pen1, k * 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn serde_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let p = random_params(2, 4, &mut rng);
        let s = serde_json::to_string(&p).unwrap();
        let back: GmmParams = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn mixture_pdf_nonnegative_and_marginals_integrate(seed in 0u64..10_000, x in -3.0f64..3.0) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let p = random_params(3, 2, &mut rng);
            prop_assert!(mixture_pdf(&[x, -x], &p).unwrap() >= 0.0);
            let marg = p.marginal(&[1]).unwrap();
            let lo = -30.0;
            let hi = 30.0;
            let mass = simpson(|t| mixture_pdf(&[t], &marg).unwrap(), lo, hi, 20_000);
            prop_assert!((mass - 1.0).abs() < 1e-6);
        }

        #[test]
        fn conditioning_never_increases_variance(seed in 0u64..10_000, m in 0usize..3) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let p = random_params(2, 6, &mut rng);
            let y0 = [0.1, -0.2, 0.3];
            let c = derive_conditional(&p, m, &y0).unwrap();
            for j in 0..2 {
                prop_assert!(c.variances[j] > 0.0);
                prop_assert!(c.variances[j] <= p.sigma(j, m, m) + 1e-15);
            }
            prop_assert!((c.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
