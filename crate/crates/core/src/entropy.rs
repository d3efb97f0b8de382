//! Entropy Search acquisition.
//!
//! `p_min` (the distribution of the minimizer's location) is represented on
//! a finite set of representer points and estimated by the argmin frequency
//! of joint posterior samples. The value of evaluating a candidate is the
//! expected change in relative entropy of `p_min` against the uniform base
//! measure, averaged over fantasized outcomes at Gauss-Hermite nodes of the
//! candidate's predictive distribution.
//!
//! Fantasies reuse one bank of posterior samples. Each sample is conditioned
//! on the fantasized observation pathwise,
//!
//! ```text
//! f'(R) = f(R) + cov(R, c) / (var(c) + sigma_n^2) * (y - f(c) - eps)
//! ```
//!
//! which is an exact draw from the conditioned posterior and keeps random
//! numbers common across fantasies and candidates.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::gp::GpSurrogate;
use crate::quadrature::GaussHermite;

/// Finite support on which `p_min` is approximated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresenterSet {
    pub points: Vec<Vec<f64>>,
}

impl RepresenterSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PminDistribution {
    pub probs: Vec<f64>,
}

impl PminDistribution {
    pub fn from_counts(counts: &[usize]) -> Self {
        let total: usize = counts.iter().sum();
        let total = total.max(1) as f64;
        Self { probs: counts.iter().map(|c| *c as f64 / total).collect() }
    }

    /// Index of the most probable representer; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// `sum_j p_j log(p_j M)`, the KL divergence from the uniform distribution.
pub fn relative_entropy(p: &PminDistribution) -> f64 {
    let m = p.probs.len() as f64;
    p.probs.iter().filter(|q| **q > 0.0).map(|q| q * (q * m).ln()).sum()
}

fn entropy_of_counts(counts: &[usize], total: usize) -> f64 {
    let m = counts.len() as f64;
    let n = total as f64;
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let q = *c as f64 / n;
            q * (q * m).ln()
        })
        .sum()
}

pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn standard_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement below `incumbent` of a normal with the given moments.
pub fn expected_improvement(mean: f64, std: f64, incumbent: f64) -> f64 {
    let gap = incumbent - mean;
    if std <= 0.0 {
        return gap.max(0.0);
    }
    let z = gap / std;
    (gap * standard_normal_cdf(z) + std * standard_normal_pdf(z)).max(0.0)
}

pub fn probability_of_improvement(mean: f64, std: f64, incumbent: f64) -> f64 {
    if std <= 0.0 {
        return if mean < incumbent { 1.0 } else { 0.0 };
    }
    standard_normal_cdf((incumbent - mean) / std)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    /// Probability of improvement.
    Pi,
    /// Expected improvement.
    Ei,
    /// Lower-confidence score `-mean + beta * std`, to be maximized.
    Ucb,
}

/// Classic acquisition scores for minimization, evaluated on the posterior at `candidate`.
pub fn baseline_acquisition(
    kind: BaselineKind,
    surrogate: &GpSurrogate,
    candidate: &[f64],
    incumbent: f64,
    beta: f64,
) -> f64 {
    let (mean, var) = surrogate.posterior(candidate);
    let std = var.sqrt();
    match kind {
        BaselineKind::Pi => probability_of_improvement(mean, std, incumbent),
        BaselineKind::Ei => expected_improvement(mean, std, incumbent),
        BaselineKind::Ucb => -mean + beta * std,
    }
}

const EI_POOL: usize = 2000;
const EI_MAX_ATTEMPTS_PER_POINT: usize = 2000;

/// Half of the points uniform over the box, half drawn by rejection with
/// acceptance probability proportional to expected improvement.
pub fn build_representers(domain: &Domain, surrogate: &GpSurrogate, m: usize, seed: u64) -> Result<RepresenterSet> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 representers, got {m}")));
    }
    if surrogate.dim() != domain.dim() {
        return Err(Error::Dimension("surrogate and domain dimensions differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_ei = m / 2;
    let mut points: Vec<Vec<f64>> = (0..m - n_ei).map(|_| domain.sample_uniform(&mut rng)).collect();

    let ei_at = |x: &[f64], incumbent: f64| {
        let (mean, var) = surrogate.posterior(x);
        expected_improvement(mean, var.sqrt(), incumbent)
    };
    let incumbent = surrogate.data().min_value();
    let ceiling = incumbent.map(|inc| {
        (0..EI_POOL)
            .map(|_| ei_at(&domain.sample_uniform(&mut rng), inc))
            .fold(0.0, f64::max)
    });

    match (incumbent, ceiling) {
        (Some(inc), Some(top)) if top > 0.0 => {
            let mut accepted = 0;
            let mut attempts = 0;
            while accepted < n_ei && attempts < EI_MAX_ATTEMPTS_PER_POINT * n_ei {
                attempts += 1;
                let x = domain.sample_uniform(&mut rng);
                let u: f64 = rng.gen();
                if u * top <= ei_at(&x, inc) {
                    points.push(x);
                    accepted += 1;
                }
            }
            while points.len() < m {
                points.push(domain.sample_uniform(&mut rng));
            }
        }
        _ => points.extend((0..n_ei).map(|_| domain.sample_uniform(&mut rng))),
    }
    Ok(RepresenterSet { points })
}

/// Joint posterior draws over the representers (first `n_reps` columns)
/// and any extra candidate points, plus one standard-normal noise draw per
/// sample.
struct SampleBank {
    n_points: usize,
    n_reps: usize,
    n_samples: usize,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Row-major `n_samples x n_points`.
    samples: Vec<f64>,
    noise: Vec<f64>,
    noise_std: f64,
}

impl SampleBank {
    fn new(surrogate: &GpSurrogate, points: &[Vec<f64>], n_reps: usize, n_samples: usize, seed: u64) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::InvalidParameter("n_samples must be positive".into()));
        }
        let n = points.len();
        let (mean, cov) = surrogate.posterior_joint(points);
        let factor = jittered_cholesky(&cov, surrogate.hyper().signal_std.powi(2))?;

        // Draws are generated point-major so the representer block does not
        // depend on how many extra candidates are appended.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = (0..n * n_samples).map(|_| rng.sample(StandardNormal)).collect();
        let eps = DMatrix::from_row_slice(n, n_samples, &eps);
        let mut draws = factor * eps;
        for mut col in draws.column_iter_mut() {
            col += &mean;
        }

        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let noise = (0..n_samples).map(|_| noise_rng.sample(StandardNormal)).collect();
        Ok(Self {
            n_points: n,
            n_reps,
            n_samples,
            mean,
            cov,
            samples: draws.as_slice().to_vec(),
            noise,
            noise_std: surrogate.hyper().noise_std,
        })
    }

    fn row(&self, s: usize) -> &[f64] {
        &self.samples[s * self.n_points..(s + 1) * self.n_points]
    }

    fn base_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_reps];
        for s in 0..self.n_samples {
            counts[argmin(&self.row(s)[..self.n_reps])] += 1;
        }
        counts
    }

    /// Quadrature-weighted mean relative entropy after a fantasized
    /// observation at column `c`.
    fn fantasy_entropy(&self, c: usize, rule: &GaussHermite) -> f64 {
        let m = self.n_reps;
        let predictive_var = self.cov[(c, c)].max(0.0) + self.noise_std.powi(2);
        if predictive_var <= f64::MIN_POSITIVE {
            return entropy_of_counts(&self.base_counts(), self.n_samples);
        }
        let w: Vec<f64> = (0..m).map(|j| self.cov[(j, c)] / predictive_var).collect();
        let sd = predictive_var.sqrt();
        let ys: Vec<f64> = rule.nodes.iter().map(|x| self.mean[c] + sd * x).collect();
        let q = ys.len();

        let mut counts = vec![vec![0usize; m]; q];
        let mut delta = vec![0.0; q];
        let mut best_val = vec![0.0; q];
        let mut best_idx = vec![0usize; q];
        for s in 0..self.n_samples {
            let row = self.row(s);
            let observed = row[c] + self.noise_std * self.noise[s];
            for k in 0..q {
                delta[k] = ys[k] - observed;
                best_val[k] = f64::INFINITY;
            }
            for (j, (f, wj)) in row[..m].iter().zip(&w).enumerate() {
                for k in 0..q {
                    let v = f + wj * delta[k];
                    if v < best_val[k] {
                        best_val[k] = v;
                        best_idx[k] = j;
                    }
                }
            }
            for k in 0..q {
                counts[k][best_idx[k]] += 1;
            }
        }
        counts
            .iter()
            .zip(&rule.weights)
            .map(|(cnt, wq)| wq * entropy_of_counts(cnt, self.n_samples))
            .sum()
    }
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Lower Cholesky factor of `cov + jitter I`, increasing the jitter by
/// decades from `1e-10 * scale` until the factorization succeeds.
fn jittered_cholesky(cov: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let mut jitter = 1e-10 * scale;
    while jitter <= 1e-2 * scale {
        let mut m = cov.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return Ok(ch.unpack());
        }
        jitter *= 10.0;
    }
    Err(Error::IllConditioned)
}

/// Argmin frequencies of `n_samples` joint posterior draws at the representers.
pub fn approximate_pmin(
    surrogate: &GpSurrogate,
    reps: &RepresenterSet,
    n_samples: usize,
    seed: u64,
) -> Result<PminDistribution> {
    if reps.is_empty() {
        return Err(Error::InvalidParameter("representer set is empty".into()));
    }
    let bank = SampleBank::new(surrogate, &reps.points, reps.len(), n_samples, seed)?;
    Ok(PminDistribution::from_counts(&bank.base_counts()))
}

/// Expected change in relative entropy of `p_min` from evaluating `candidate`.
pub fn expected_entropy_change(
    surrogate: &GpSurrogate,
    reps: &RepresenterSet,
    candidate: &[f64],
    quadrature_order: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let (points, columns) = candidate_columns(reps, std::slice::from_ref(&candidate.to_vec()));
    let bank = SampleBank::new(surrogate, &points, reps.len(), n_samples, seed)?;
    let rule = GaussHermite::new(quadrature_order);
    let current = entropy_of_counts(&bank.base_counts(), n_samples);
    Ok(bank.fantasy_entropy(columns[0], &rule) - current)
}

/// Bank columns for each candidate: a representer's own column when the
/// candidate coincides with it, otherwise a new column appended after the
/// representers.
fn candidate_columns(reps: &RepresenterSet, candidates: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let key = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    for (i, p) in reps.points.iter().enumerate() {
        index.entry(key(p)).or_insert(i);
    }
    let mut points = reps.points.clone();
    let columns = candidates
        .iter()
        .map(|c| {
            *index.entry(key(c)).or_insert_with(|| {
                points.push(c.clone());
                points.len() - 1
            })
        })
        .collect();
    (points, columns)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    /// Representer count `M`.
    pub n_representers: usize,
    /// Joint posterior samples used for `p_min` and the fantasies.
    pub n_samples: usize,
    pub quadrature_order: usize,
    /// Representers scored as candidates; `None` scores all of them.
    pub n_candidates: Option<usize>,
    /// Additional uniform draws scored as candidates.
    pub extra_candidates: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self { n_representers: 400, n_samples: 2000, quadrature_order: 9, n_candidates: None, extra_candidates: 0 }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_representers < 2 || self.n_samples == 0 || self.quadrature_order == 0 {
            return Err(Error::InvalidParameter(format!("invalid acquisition configuration {self:?}")));
        }
        if self.n_candidates == Some(0) && self.extra_candidates == 0 {
            return Err(Error::InvalidParameter("no acquisition candidates".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionChoice {
    pub next_theta: Vec<f64>,
    pub expected_gain: f64,
    pub best_guess: Vec<f64>,
}

/// Everything the acquisition step computed, for export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionTrace {
    pub candidates: Vec<Vec<f64>>,
    pub gains: Vec<f64>,
    pub pmin: Vec<f64>,
    pub relative_entropy: f64,
    pub best_guess: Vec<f64>,
    pub best_guess_index: usize,
    pub next_theta: Vec<f64>,
    pub next_index: usize,
}

/// Score every candidate by expected entropy change and pick the maximizer;
/// the best guess is the representer with the largest `p_min` mass. Ties
/// resolve to the lowest index.
pub fn select_next(
    surrogate: &GpSurrogate,
    reps: &RepresenterSet,
    candidates: &[Vec<f64>],
    config: &AcquisitionConfig,
    seed: u64,
) -> Result<(AcquisitionChoice, AcquisitionTrace)> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("no acquisition candidates".into()));
    }
    if reps.is_empty() {
        return Err(Error::InvalidParameter("representer set is empty".into()));
    }
    let (points, columns) = candidate_columns(reps, candidates);
    let bank = SampleBank::new(surrogate, &points, reps.len(), config.n_samples, seed)?;
    let rule = GaussHermite::new(config.quadrature_order);

    let counts = bank.base_counts();
    let current = entropy_of_counts(&counts, config.n_samples);
    let pmin = PminDistribution::from_counts(&counts);

    let gains: Vec<f64> = columns.iter().map(|c| bank.fantasy_entropy(*c, &rule) - current).collect();
    let mut next = 0;
    for (i, g) in gains.iter().enumerate() {
        if *g > gains[next] {
            next = i;
        }
    }
    let bg = pmin.argmax();
    let choice = AcquisitionChoice {
        next_theta: candidates[next].clone(),
        expected_gain: gains[next],
        best_guess: reps.points[bg].clone(),
    };
    let trace = AcquisitionTrace {
        candidates: candidates.to_vec(),
        gains,
        relative_entropy: relative_entropy(&pmin),
        pmin: pmin.probs,
        best_guess: choice.best_guess.clone(),
        best_guess_index: bg,
        next_theta: choice.next_theta.clone(),
        next_index: next,
    };
    Ok((choice, trace))
}
