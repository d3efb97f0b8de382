//! Gaussian-process surrogate of the tuning cost.
//!
//! Zero prior mean, squared-exponential kernel with one lengthscale per
//! parameter dimension (ARD), Gaussian likelihood. Hyperparameters are fitted
//! by maximizing the log marginal likelihood plus independent Gamma log
//! priors (MAP), searching in log coordinates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::domain::Domain;
use crate::error::{Error, Result};

/// Relative diagonal jitter, scaled by the signal variance.
pub const GRAM_JITTER: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Kernel and likelihood hyperparameters `{lambda_1..lambda_D, sigma, sigma_n}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lengthscales: Vec<f64>,
    pub signal_std: f64,
    pub noise_std: f64,
}

impl Hyperparams {
    pub fn new(lengthscales: Vec<f64>, signal_std: f64, noise_std: f64) -> Result<Self> {
        let h = Self { lengthscales, signal_std, noise_std };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.lengthscales.iter().chain([&self.signal_std, &self.noise_std]);
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidParameter("at least one lengthscale is required".into()));
        }
        if all.into_iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(format!("hyperparameters must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `[ln lambda_1, .., ln lambda_D, ln sigma, ln sigma_n]`.
    pub fn to_log(&self) -> Vec<f64> {
        self.lengthscales
            .iter()
            .chain([&self.signal_std, &self.noise_std])
            .map(|v| v.ln())
            .collect()
    }

    pub fn from_log(log: &[f64]) -> Self {
        let d = log.len() - 2;
        Self {
            lengthscales: log[..d].iter().map(|v| v.exp()).collect(),
            signal_std: log[d].exp(),
            noise_std: log[d + 1].exp(),
        }
    }
}

/// Gamma distribution characterized by its mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub mean: f64,
    pub std: f64,
}

impl GammaPrior {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(mean > 0.0 && std > 0.0 && mean.is_finite() && std.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma prior needs mean, std > 0, got {mean}, {std}")));
        }
        Ok(Self { mean, std })
    }

    /// `k = (mean / std)^2`
    pub fn shape(&self) -> f64 {
        (self.mean / self.std).powi(2)
    }

    /// `theta = std^2 / mean`
    pub fn scale(&self) -> f64 {
        self.std * self.std / self.mean
    }

    /// `(k - 1) theta`, or zero when `k < 1`.
    pub fn mode(&self) -> f64 {
        ((self.shape() - 1.0) * self.scale()).max(0.0)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let (k, theta) = (self.shape(), self.scale());
        (k - 1.0) * x.ln() - x / theta - ln_gamma(k) - k * theta.ln()
    }

    /// Derivative of `ln_pdf(x)` with respect to `ln x`.
    fn d_ln_pdf_dlog(&self, x: f64) -> f64 {
        (self.shape() - 1.0) - x / self.scale()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        Gamma::new(self.shape(), self.scale())
            .map(|g| g.sample(rng))
            .unwrap_or(self.mean)
    }
}

/// One prior for every lengthscale, one for the signal and one for the noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPriors {
    pub lengthscale: GammaPrior,
    pub signal_std: GammaPrior,
    pub noise_std: GammaPrior,
}

impl HyperPriors {
    /// Hyperparameters at the prior means.
    pub fn means(&self, dim: usize) -> Hyperparams {
        Hyperparams {
            lengthscales: vec![self.lengthscale.mean; dim],
            signal_std: self.signal_std.mean,
            noise_std: self.noise_std.mean,
        }
    }

    pub fn log_density(&self, h: &Hyperparams) -> f64 {
        h.lengthscales.iter().map(|l| self.lengthscale.ln_pdf(*l)).sum::<f64>()
            + self.signal_std.ln_pdf(h.signal_std)
            + self.noise_std.ln_pdf(h.noise_std)
    }

    fn log_density_gradient(&self, h: &Hyperparams) -> Vec<f64> {
        h.lengthscales
            .iter()
            .map(|l| self.lengthscale.d_ln_pdf_dlog(*l))
            .chain([self.signal_std.d_ln_pdf_dlog(h.signal_std), self.noise_std.d_ln_pdf_dlog(h.noise_std)])
            .collect()
    }

    fn sample(&self, dim: usize, rng: &mut ChaCha8Rng) -> Hyperparams {
        Hyperparams {
            lengthscales: (0..dim).map(|_| self.lengthscale.sample(rng)).collect(),
            signal_std: self.signal_std.sample(rng),
            noise_std: self.noise_std.sample(rng),
        }
    }
}

/// Observed locations and noisy cost values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub locations: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(locations: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        let mut data = Self::new();
        for (x, y) in locations.into_iter().zip(values) {
            data.push(x, y)?;
        }
        Ok(data)
    }

    pub fn push(&mut self, theta: Vec<f64>, value: f64) -> Result<()> {
        if !value.is_finite() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("dataset entries must be finite".into()));
        }
        if let Some(first) = self.locations.first() {
            if first.len() != theta.len() {
                return Err(Error::Dimension(format!(
                    "location has {} coordinates, dataset has {}",
                    theta.len(),
                    first.len()
                )));
            }
        }
        self.locations.push(theta);
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min_value(&self) -> Option<f64> {
        self.values.iter().copied().reduce(f64::min)
    }
}

/// `sigma^2 exp(-1/2 sum_j (a_j - b_j)^2 / lambda_j^2)`.
pub fn kernel_se_ard(a: &[f64], b: &[f64], hyper: &Hyperparams) -> f64 {
    debug_assert_eq!(a.len(), hyper.dim());
    debug_assert_eq!(b.len(), hyper.dim());
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&hyper.lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    hyper.signal_std.powi(2) * (-0.5 * r2).exp()
}

/// A GP conditioned on a dataset, with the factorization of `K + sigma_n^2 I` cached.
#[derive(Clone, Debug)]
pub struct GpSurrogate {
    hyper: Hyperparams,
    data: Dataset,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
}

impl GpSurrogate {
    pub fn new(hyper: Hyperparams, data: Dataset) -> Result<Self> {
        hyper.validate()?;
        if let Some(x) = data.locations.first() {
            if x.len() != hyper.dim() {
                return Err(Error::Dimension(format!(
                    "data has {} coordinates, kernel has {} lengthscales",
                    x.len(),
                    hyper.dim()
                )));
            }
        }
        if data.is_empty() {
            return Ok(Self { hyper, data, chol: None, alpha: DVector::zeros(0) });
        }
        let chol = gram_matrix(&data.locations, &hyper).cholesky().ok_or(Error::IllConditioned)?;
        let alpha = chol.solve(&DVector::from_column_slice(&data.values));
        Ok(Self { hyper, data, chol: Some(chol), alpha })
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.hyper.dim()
    }

    /// A new surrogate with one more observation.
    pub fn with_observation(&self, theta: Vec<f64>, value: f64) -> Result<Self> {
        let mut data = self.data.clone();
        data.push(theta, value)?;
        Self::new(self.hyper.clone(), data)
    }

    pub fn with_hyper(&self, hyper: Hyperparams) -> Result<Self> {
        Self::new(hyper, self.data.clone())
    }

    fn cross_covariance(&self, points: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(self.data.len(), points.len(), |i, j| {
            kernel_se_ard(&self.data.locations[i], &points[j], &self.hyper)
        })
    }

    /// Posterior mean and variance at one query point.
    pub fn posterior(&self, query: &[f64]) -> (f64, f64) {
        let prior = self.hyper.signal_std.powi(2);
        let Some(chol) = &self.chol else {
            return (0.0, prior);
        };
        let k = DVector::from_iterator(
            self.data.len(),
            self.data.locations.iter().map(|x| kernel_se_ard(x, query, &self.hyper)),
        );
        let mean = k.dot(&self.alpha);
        let v = chol.l_dirty().solve_lower_triangular(&k).expect("triangular factor is nonsingular");
        let var = (prior - v.norm_squared()).max(0.0);
        (mean, var)
    }

    /// Joint posterior mean vector and covariance matrix over `points`.
    pub fn posterior_joint(&self, points: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let n = points.len();
        let mut cov = DMatrix::from_fn(n, n, |i, j| kernel_se_ard(&points[i], &points[j], &self.hyper));
        let Some(chol) = &self.chol else {
            return (DVector::zeros(n), cov);
        };
        let kxs = self.cross_covariance(points);
        let mean = kxs.tr_mul(&self.alpha);
        let v = chol.l_dirty().solve_lower_triangular(&kxs).expect("triangular factor is nonsingular");
        cov -= v.tr_mul(&v);
        let t = cov.transpose();
        cov += t;
        cov *= 0.5;
        (mean, cov)
    }

    /// `-1/2 y' K^-1 y - 1/2 log det K - N/2 log 2 pi`, with `K` including noise.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let Some(chol) = &self.chol else {
            return 0.0;
        };
        let y = DVector::from_column_slice(&self.data.values);
        let n = self.data.len() as f64;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        -0.5 * y.dot(&self.alpha) - 0.5 * log_det - 0.5 * n * LN_2PI
    }

    /// Gradient of the log marginal likelihood with respect to the log
    /// hyperparameters, ordered as in [`Hyperparams::to_log`].
    pub fn log_marginal_likelihood_gradient(&self) -> Vec<f64> {
        let d = self.dim();
        let Some(chol) = &self.chol else {
            return vec![0.0; d + 2];
        };
        let n = self.data.len();
        let k_inv = chol.inverse();
        let w = &self.alpha * self.alpha.transpose() - k_inv;
        let h = &self.hyper;
        let sigma2 = h.signal_std.powi(2);
        let mut grad = vec![0.0; d + 2];
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (&self.data.locations[i], &self.data.locations[j]);
                let kse = kernel_se_ard(a, b, h);
                let wij = w[(i, j)];
                for (l, g) in grad.iter_mut().take(d).enumerate() {
                    *g += wij * kse * ((a[l] - b[l]) / h.lengthscales[l]).powi(2);
                }
                grad[d] += wij * 2.0 * kse;
            }
            grad[d] += w[(i, i)] * 2.0 * GRAM_JITTER * sigma2;
            grad[d + 1] += w[(i, i)] * 2.0 * h.noise_std.powi(2);
        }
        grad.iter_mut().for_each(|g| *g *= 0.5);
        grad
    }

    pub fn snapshot(&self, domain: &Domain) -> SurrogateSnapshot {
        SurrogateSnapshot {
            hyperparams: self.hyper.clone(),
            dataset: self.data.clone(),
            domain: domain.clone(),
            log_marginal_likelihood: self.log_marginal_likelihood(),
        }
    }
}

/// `K + (sigma_n^2 + jitter) I`.
pub fn gram_matrix(locations: &[Vec<f64>], hyper: &Hyperparams) -> DMatrix<f64> {
    let n = locations.len();
    let diag = hyper.noise_std.powi(2) + GRAM_JITTER * hyper.signal_std.powi(2);
    DMatrix::from_fn(n, n, |i, j| {
        let k = kernel_se_ard(&locations[i], &locations[j], hyper);
        if i == j {
            k + diag
        } else {
            k
        }
    })
}

pub fn posterior(surrogate: &GpSurrogate, query: &[f64]) -> (f64, f64) {
    surrogate.posterior(query)
}

pub fn log_marginal_likelihood(surrogate: &GpSurrogate) -> f64 {
    surrogate.log_marginal_likelihood()
}

/// JSON-serializable view of a surrogate for post-hoc plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSnapshot {
    pub hyperparams: Hyperparams,
    pub dataset: Dataset,
    pub domain: Domain,
    pub log_marginal_likelihood: f64,
}

/// Log marginal likelihood plus log prior, and its gradient in log coordinates.
pub fn map_objective(data: &Dataset, priors: &HyperPriors, hyper: &Hyperparams) -> Result<(f64, Vec<f64>)> {
    let gp = GpSurrogate::new(hyper.clone(), data.clone())?;
    let value = gp.log_marginal_likelihood() + priors.log_density(hyper);
    let grad = gp
        .log_marginal_likelihood_gradient()
        .into_iter()
        .zip(priors.log_density_gradient(hyper))
        .map(|(a, b)| a + b)
        .collect();
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub hyper: Hyperparams,
    pub objective: f64,
    pub initial_objective: f64,
    /// False when no start improved on `init`; `hyper` is then `init` unchanged.
    pub improved: bool,
}

/// Number of prior-sampled restarts in addition to the supplied start.
pub const FIT_RESTARTS: usize = 4;
/// Iteration cap per start.
pub const FIT_MAX_ITERATIONS: usize = 200;

const LOG_BOUND: f64 = 30.0;

/// MAP estimate of the hyperparameters under independent Gamma priors.
///
/// Quasi-Newton (BFGS) ascent with backtracking in log coordinates, started
/// from `init` and from [`FIT_RESTARTS`] draws of the prior.
pub fn fit_map(data: &Dataset, priors: &HyperPriors, init: &Hyperparams, seed: u64) -> Result<FitOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("fitting needs at least one observation".into()));
    }
    init.validate()?;
    let initial_objective = map_objective(data, priors, init).map(|(v, _)| v).unwrap_or(f64::NEG_INFINITY);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![init.clone()];
    starts.extend((0..FIT_RESTARTS).map(|_| priors.sample(init.dim(), &mut rng)));

    let objective = |u: &[f64]| -> Option<(f64, Vec<f64>)> {
        if u.iter().any(|v| !v.is_finite() || v.abs() > LOG_BOUND) {
            return None;
        }
        let (f, g) = map_objective(data, priors, &Hyperparams::from_log(u)).ok()?;
        f.is_finite().then_some((f, g))
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in &starts {
        if let Some((f, u)) = bfgs_maximize(&objective, start.to_log(), FIT_MAX_ITERATIONS) {
            if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
                best = Some((f, u));
            }
        }
    }

    match best {
        Some((f, u)) if f > initial_objective => Ok(FitOutcome {
            hyper: Hyperparams::from_log(&u),
            objective: f,
            initial_objective,
            improved: true,
        }),
        _ => {
            log::warn!("hyperparameter fit did not improve on the initial point");
            Ok(FitOutcome { hyper: init.clone(), objective: initial_objective, initial_objective, improved: false })
        }
    }
}

fn bfgs_maximize<F>(objective: &F, x0: Vec<f64>, max_iter: usize) -> Option<(f64, Vec<f64>)>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (mut f, g0) = objective(&x0)?;
    let mut x = DVector::from_vec(x0);
    let mut grad = DVector::from_vec(g0);
    // Inverse Hessian approximation of the negated objective.
    let mut h = DMatrix::<f64>::identity(n, n);

    for _ in 0..max_iter {
        if grad.norm() < 1e-8 * (1.0 + f.abs()) {
            break;
        }
        let mut dir = &h * &grad;
        if dir.dot(&grad) <= 0.0 {
            h = DMatrix::identity(n, n);
            dir = grad.clone();
        }
        let max_step = dir.amax();
        if max_step > 2.0 {
            dir *= 2.0 / max_step;
        }

        let slope = dir.dot(&grad);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &x + &dir * step;
            if let Some((ft, gt)) = objective(trial.as_slice()) {
                if ft >= f + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else { break };
        let grad_new = DVector::from_vec(g_new);

        // Curvature pair for the minimization of -f.
        let s = &x_new - &x;
        let y = &grad - &grad_new;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - &s * y.transpose() * rho;
            let right = &eye - &y * s.transpose() * rho;
            h = left * h * right + &s * s.transpose() * rho;
        }

        let gain = f_new - f;
        x = x_new;
        f = f_new;
        grad = grad_new;
        if gain.abs() < 1e-12 * (1.0 + f.abs()) {
            break;
        }
    }
    Some((f, x.as_slice().to_vec()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relevance {
    /// Domain width over lengthscale.
    pub score: f64,
    pub relevant: bool,
}

/// Automatic-relevance diagnostic; nothing is removed from the model.
pub fn ard_relevance(hyper: &Hyperparams, domain_widths: &[f64], threshold: f64) -> Result<Vec<Relevance>> {
    if domain_widths.len() != hyper.dim() {
        return Err(Error::Dimension(format!(
            "{} widths for {} lengthscales",
            domain_widths.len(),
            hyper.dim()
        )));
    }
    Ok(domain_widths
        .iter()
        .zip(&hyper.lengthscales)
        .map(|(w, l)| {
            let score = w / l;
            Relevance { score, relevant: score >= threshold }
        })
        .collect())
}
