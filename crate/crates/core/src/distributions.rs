//! Elementary densities, isotropic Gaussian mixtures, and EM fitting.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::matrix::{sq_dist, Matrix};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Default lower bound on component variances.
pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;

/// Default number of mixture components for supporting and baseline GMMs.
pub const DEFAULT_COMPONENTS: usize = 10;

const GMM_FORMAT_VERSION: u32 = 1;

/// `log Σ exp(x_i)` with the max shifted out.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("logsumexp"));
    }
    Ok(logsumexp_nonempty(xs))
}

pub(crate) fn logsumexp_nonempty(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn std_normal_logpdf(x: f64) -> f64 {
    -0.5 * (LN_2PI + x * x)
}

/// Standard normal CDF `Φ(x)`, evaluated through `erfc` so that the lower tail
/// keeps full relative precision.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `log Φ(x)`, finite for every finite `x`.
pub fn std_normal_logcdf(x: f64) -> f64 {
    if x > -30.0 {
        return std_normal_cdf(x).ln();
    }
    // Asymptotic tail series: Φ(x) ≈ φ(x)/|x| · Σ_k (-1)^k (2k-1)!! / x^{2k}.
    let inv_x2 = 1.0 / (x * x);
    let mut term = 1.0;
    let mut series = 1.0;
    for k in 1..12 {
        term *= -((2 * k - 1) as f64) * inv_x2;
        series += term;
    }
    std_normal_logpdf(x) - (-x).ln() + series.ln()
}

/// `log(1 - exp(x))` for `x <= 0`.
fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// `log(Φ(hi) - Φ(lo))` for `hi >= lo`, using whichever tail avoids cancellation.
pub(crate) fn log_normal_cdf_diff(hi: f64, lo: f64) -> f64 {
    if hi <= lo {
        return f64::NEG_INFINITY;
    }
    if hi + lo > 0.0 {
        // Φ(hi) - Φ(lo) = Φ(-lo) - Φ(-hi)
        let big = std_normal_logcdf(-lo);
        let small = std_normal_logcdf(-hi);
        big + log1m_exp(small - big)
    } else {
        let big = std_normal_logcdf(hi);
        let small = std_normal_logcdf(lo);
        big + log1m_exp(small - big)
    }
}

/// Log density of an isotropic Gaussian `N(mean, var·I)`.
pub fn gaussian_iso_logpdf(x: &[f64], mean: &[f64], var: f64) -> Result<f64> {
    check_dim(mean.len(), x.len())?;
    if !(var > 0.0) || !var.is_finite() {
        return Err(invalid(format!("variance must be finite and > 0, got {var}")));
    }
    Ok(iso_logpdf_unchecked(x, mean, var))
}

pub(crate) fn iso_logpdf_unchecked(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    -0.5 * d * (LN_2PI + var.ln()) - sq_dist(x, mean) / (2.0 * var)
}

/// Log density of the Bhattacharjee distribution: `N(z; y, 1)` with
/// `y ~ uniform(a, b)` integrated out, i.e. `log[(Φ(z−a) − Φ(z−b)) / (b−a)]`.
pub fn bhattacharjee_logpdf(z: f64, a: f64, b: f64) -> Result<f64> {
    if !(a < b) {
        return Err(invalid(format!("bhattacharjee range needs a < b, got [{a}, {b}]")));
    }
    Ok(bhattacharjee_unchecked(z, a, b))
}

pub(crate) fn bhattacharjee_unchecked(z: f64, a: f64, b: f64) -> f64 {
    log_normal_cdf_diff(z - a, z - b) - (b - a).ln()
}

/// `d/dz` of [`bhattacharjee_logpdf`].
pub(crate) fn bhattacharjee_dlogpdf(z: f64, a: f64, b: f64) -> f64 {
    let log_mass = log_normal_cdf_diff(z - a, z - b);
    (std_normal_logpdf(z - a) - log_mass).exp() - (std_normal_logpdf(z - b) - log_mass).exp()
}

/// Mixture of isotropic Gaussians, one scalar variance per component.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Matrix,
    variances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct GmmDocument {
    version: u32,
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Matrix, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::EmptyInput("gmm components"));
        }
        check_dim(k, means.rows())?;
        check_dim(k, variances.len())?;
        if means.cols() == 0 {
            return Err(invalid("gmm dimension must be >= 1"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid("gmm weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("gmm weights sum to {total}, expected 1")));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(invalid("gmm variances must be finite and > 0"));
        }
        if means.as_slice().iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("gmm means"));
        }
        Ok(Self { weights, means, variances })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let mut scratch = vec![0.0; self.components()];
        Ok(self.logpdf_with(x, &mut scratch))
    }

    /// Fills `scores` with `log w_k + log N(x; μ_k, σ²_k)` and returns their logsumexp.
    fn logpdf_with(&self, x: &[f64], scores: &mut [f64]) -> f64 {
        for (k, s) in scores.iter_mut().enumerate() {
            *s = self.weights[k].ln() + iso_logpdf_unchecked(x, self.means.row(k), self.variances[k]);
        }
        logsumexp_nonempty(scores)
    }

    /// Mean log-likelihood over the rows of `data`.
    pub fn mean_loglik(&self, data: &Matrix) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("gmm data"));
        }
        check_dim(self.dim(), data.cols())?;
        let mut scratch = vec![0.0; self.components()];
        let total: f64 = data.iter_rows().map(|x| self.logpdf_with(x, &mut scratch)).sum();
        Ok(total / data.rows() as f64)
    }

    /// Ancestral sampling: component by weight, then an isotropic Gaussian draw.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Matrix> {
        if n == 0 {
            return Err(invalid("sample count must be >= 1"));
        }
        let picker = WeightedIndex::new(&self.weights)
            .map_err(|e| invalid(format!("gmm weights: {e}")))?;
        let d = self.dim();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let k = picker.sample(rng);
            let sd = self.variances[k].sqrt();
            let mean = self.means.row(k);
            for (o, m) in out.row_mut(i).iter_mut().zip(mean) {
                let eps: f64 = rng.sample(StandardNormal);
                *o = m + sd * eps;
            }
        }
        Ok(out)
    }

    pub(crate) fn to_document(&self) -> GmmDocument {
        GmmDocument {
            version: GMM_FORMAT_VERSION,
            d: self.dim(),
            k: self.components(),
            weights: self.weights.clone(),
            means: self.means.iter_rows().map(<[f64]>::to_vec).collect(),
            variances: self.variances.clone(),
        }
    }

    pub(crate) fn from_document(doc: GmmDocument) -> Result<Self> {
        if doc.version != GMM_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported gmm version {}", doc.version)));
        }
        let means = Matrix::from_rows(&doc.means)?;
        check_dim(doc.k, doc.weights.len())?;
        if doc.k > 0 {
            check_dim(doc.d, means.cols())?;
        }
        Self::new(doc.weights, means, doc.variances)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub var_floor: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 200, tol: 1e-6, var_floor: DEFAULT_VAR_FLOOR, seed: 0 }
    }
}

/// Outcome of an EM run, including the log-likelihood at every visited parameter set.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: GmmModel,
    /// Total training log-likelihood; entry `t` is evaluated at the parameters
    /// produced by `t` M-steps.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
}

/// Fit a `k`-component isotropic GMM by EM from k-means++ seeding.
pub fn gmm_fit_em(data: &Matrix, k: usize, config: &EmConfig) -> Result<GmmModel> {
    gmm_fit_em_traced(data, k, config).map(|fit| fit.model)
}

pub fn gmm_fit_em_traced(data: &Matrix, k: usize, config: &EmConfig) -> Result<EmFit> {
    let n = data.rows();
    let d = data.cols();
    if k == 0 {
        return Err(invalid("component count must be >= 1"));
    }
    if d == 0 {
        return Err(invalid("data dimension must be >= 1"));
    }
    if n < k {
        return Err(invalid(format!("need at least K={k} points, got {n}")));
    }
    if data.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gmm training data"));
    }
    if !(config.var_floor > 0.0) {
        return Err(invalid("variance floor must be > 0"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centers = kmeans_pp_seeds(data, k, &mut rng);
    let mean = data.column_means();
    let pooled_var = data.iter_rows().map(|x| sq_dist(x, &mean)).sum::<f64>() / (n * d) as f64;

    let mut weights = vec![1.0 / k as f64; k];
    let mut means = data.select_rows(&centers);
    let mut variances = vec![pooled_var.max(config.var_floor); k];

    let mut resp = vec![0.0; n * k];
    let mut log_likelihoods = Vec::new();
    let mut converged = false;

    for iter in 0..=config.max_iters {
        // E-step at the current parameters.
        let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let mut total = 0.0;
        for i in 0..n {
            let x = data.row(i);
            let r = &mut resp[i * k..(i + 1) * k];
            for c in 0..k {
                r[c] = log_w[c] + iso_logpdf_unchecked(x, means.row(c), variances[c]);
            }
            let norm = logsumexp_nonempty(r);
            total += norm;
            r.iter_mut().for_each(|v| *v = (*v - norm).exp());
        }
        let prev = log_likelihoods.last().copied();
        log_likelihoods.push(total);
        if let Some(prev) = prev {
            if total - prev < config.tol {
                converged = true;
                break;
            }
        }
        if iter == config.max_iters {
            break;
        }

        // M-step.
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            weights[c] = nk / n as f64;
            if nk <= f64::MIN_POSITIVE {
                continue;
            }
            let row = means.row_mut(c);
            row.iter_mut().for_each(|m| *m = 0.0);
            for i in 0..n {
                let r = resp[i * k + c];
                if r == 0.0 {
                    continue;
                }
                for (m, x) in row.iter_mut().zip(data.row(i)) {
                    *m += r * x;
                }
            }
            row.iter_mut().for_each(|m| *m /= nk);
            let mu = means.row(c);
            let spread: f64 = (0..n).map(|i| resp[i * k + c] * sq_dist(data.row(i), mu)).sum();
            variances[c] = (spread / (nk * d as f64)).max(config.var_floor);
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
    }

    let model = GmmModel { weights, means, variances };
    Ok(EmFit { model, log_likelihoods, converged })
}

/// k-means++ seeding: first center uniform, then proportional to squared distance.
fn kmeans_pp_seeds<R: Rng>(data: &Matrix, k: usize, rng: &mut R) -> Vec<usize> {
    let n = data.rows();
    let mut centers = Vec::with_capacity(k);
    centers.push(rng.random_range(0..n));
    let mut dist2: Vec<f64> = data.iter_rows().map(|x| sq_dist(x, data.row(centers[0]))).collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // All points coincide with existing centers.
            (0..n).find(|i| !centers.contains(i)).unwrap_or(0)
        };
        centers.push(next);
        let c = data.row(next);
        for (i, d) in dist2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), c));
        }
    }
    centers
}
