//! The tuning loop: map parameters to design weights, synthesize an LQR
//! gain on the nominal model, run an episode on the true plant, and let
//! Entropy Search pick the next parameters.

use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::entropy::{build_representers, select_next, AcquisitionConfig, AcquisitionTrace, RepresenterSet};
use crate::error::{Error, Result};
use crate::gp::{fit_map, Dataset, GpSurrogate, HyperPriors, Hyperparams};
use crate::lqr::{lqr_gain, ControllerGain, NominalModel, WeightPair};
use crate::plant::{linearize_and_discretize, run_episode, CostEvaluation, Episode, EpisodeConfig, PoleParams, SafetyLimits};

/// One diagonal entry of a design weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightEntry {
    Fixed(f64),
    /// `factor * theta[param]`.
    Scaled { param: usize, factor: f64 },
}

impl WeightEntry {
    fn eval(&self, theta: &[f64]) -> f64 {
        match *self {
            WeightEntry::Fixed(v) => v,
            WeightEntry::Scaled { param, factor } => factor * theta[param],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    TwoD,
    FourD,
    Custom,
}

/// Diagonal parameterization `theta -> (Wx(theta), Wu(theta))` over a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignWeightMap {
    pub kind: MapKind,
    pub wx: Vec<WeightEntry>,
    pub wu: Vec<WeightEntry>,
    pub domain: Domain,
}

impl DesignWeightMap {
    /// `Wx = diag(1, 50 t1, 10, 50 t2)`, `Wu = 10` on `[0.01, 10]^2`.
    pub fn two_d() -> Self {
        use WeightEntry::*;
        Self {
            kind: MapKind::TwoD,
            wx: vec![Fixed(1.0), Scaled { param: 0, factor: 50.0 }, Fixed(10.0), Scaled { param: 1, factor: 50.0 }],
            wu: vec![Fixed(10.0)],
            domain: Domain::cube(2, 0.01, 10.0).expect("static bounds"),
        }
    }

    /// `Wx = diag(t1, 25 t2, 10 t3, 25 t4)`, `Wu = 10` on `[0.01, 10]^4`.
    pub fn four_d() -> Self {
        use WeightEntry::*;
        Self {
            kind: MapKind::FourD,
            wx: vec![
                Scaled { param: 0, factor: 1.0 },
                Scaled { param: 1, factor: 25.0 },
                Scaled { param: 2, factor: 10.0 },
                Scaled { param: 3, factor: 25.0 },
            ],
            wu: vec![Fixed(10.0)],
            domain: Domain::cube(4, 0.01, 10.0).expect("static bounds"),
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Every scaled entry must reference an existing parameter with a
    /// positive factor, and the box must be strictly positive, so that every
    /// `theta` in the box gives positive-definite weights.
    pub fn validate(&self) -> Result<()> {
        for e in self.wx.iter().chain(&self.wu) {
            let ok = match *e {
                WeightEntry::Fixed(v) => v > 0.0 && v.is_finite(),
                WeightEntry::Scaled { param, factor } => param < self.dim() && factor > 0.0 && factor.is_finite(),
            };
            if !ok {
                return Err(Error::InvalidParameter(format!("invalid design weight entry {e:?}")));
            }
        }
        if self.domain.lower.iter().any(|l| *l <= 0.0) {
            return Err(Error::InvalidParameter("design parameters must be bounded away from zero".into()));
        }
        if self.wx.is_empty() || self.wu.is_empty() {
            return Err(Error::InvalidParameter("design weights must be nonempty".into()));
        }
        Ok(())
    }
}

pub fn design_weights(map: &DesignWeightMap, theta: &[f64]) -> Result<WeightPair> {
    map.domain.check(theta)?;
    let wx: Vec<f64> = map.wx.iter().map(|e| e.eval(theta)).collect();
    let wu: Vec<f64> = map.wu.iter().map(|e| e.eval(theta)).collect();
    WeightPair::diagonal(&wx, &wu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunerConfig {
    pub design_map: DesignWeightMap,
    pub theta0: Vec<f64>,
    pub n_iterations: usize,
    /// Also evaluate the box corners before the loop.
    pub init_corner_evals: bool,
    pub priors: HyperPriors,
    /// Plant used for episodes.
    pub plant: PoleParams,
    /// Plant whose linearization is used for synthesis.
    pub nominal: PoleParams,
    /// Diagonal of the performance state weight `Q`.
    pub performance_q: Vec<f64>,
    /// Diagonal of the performance input weight `R`.
    pub performance_r: Vec<f64>,
    /// Fixed integrator gain.
    pub fz: f64,
    /// Episode settings, including the penalty `j_unstable`.
    pub episode: EpisodeConfig,
    pub safety: SafetyLimits,
    pub acquisition: AcquisitionConfig,
    pub seed: u64,
    /// Store measured wall time in the history; off by default so that
    /// histories are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        self.design_map.validate()?;
        self.design_map.domain.check(&self.theta0)?;
        if self.n_iterations == 0 {
            return Err(Error::InvalidParameter("n_iterations must be at least 1".into()));
        }
        self.plant.validate()?;
        self.nominal.validate()?;
        self.episode.validate()?;
        self.safety.validate()?;
        self.acquisition.validate()?;
        if self.design_map.wx.len() != self.performance_q.len() || self.design_map.wu.len() != self.performance_r.len() {
            return Err(Error::Dimension("design and performance weights differ in size".into()));
        }
        WeightPair::diagonal(&self.performance_q, &self.performance_r)?;
        Ok(())
    }

    /// Nominal model and performance weights shared by every evaluation.
    pub fn context(&self) -> Result<TuningContext> {
        self.validate()?;
        Ok(TuningContext {
            nominal: linearize_and_discretize(&self.nominal, self.episode.dt)?,
            performance: WeightPair::diagonal(&self.performance_q, &self.performance_r)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TuningContext {
    pub nominal: NominalModel,
    pub performance: WeightPair,
}

/// LQR gain for `theta`, with the configured integrator gain.
pub fn synthesize(theta: &[f64], config: &TunerConfig, ctx: &TuningContext) -> Result<ControllerGain> {
    let weights = design_weights(&config.design_map, theta)?;
    Ok(lqr_gain(&ctx.nominal, &weights)?.with_integrator(config.fz))
}

/// One episode with the gain designed for `theta`. A synthesis failure
/// counts as an unstable run.
pub fn cost_episode(theta: &[f64], config: &TunerConfig, ctx: &TuningContext, seed: u64) -> Result<Episode> {
    match synthesize(theta, config, ctx) {
        Ok(gain) => run_episode(&gain, &config.plant, &config.episode, &ctx.performance, &config.safety, seed),
        Err(Error::NonConvergence { iterations, residual }) => {
            warn!("synthesis failed at {theta:?} after {iterations} iterations (residual {residual:e}); scoring as unstable");
            Ok(Episode {
                evaluation: CostEvaluation::unstable(config.episode.j_unstable, 0, Some(0)),
                trajectory: Default::default(),
            })
        }
        Err(e) => Err(e),
    }
}

pub fn cost_evaluation(theta: &[f64], config: &TunerConfig, ctx: &TuningContext, seed: u64) -> Result<CostEvaluation> {
    cost_episode(theta, config, ctx, seed).map(|e| e.evaluation)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestGuess {
    pub theta: Vec<f64>,
    /// Posterior mean at `theta` under the surrogate that produced it.
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 0 for initial evaluations, then 1, 2, ... for loop iterations.
    pub iter: usize,
    pub theta: Vec<f64>,
    pub j_hat: f64,
    pub stable: bool,
    pub best_guess: Option<BestGuess>,
    pub hyper: Hyperparams,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TuningRun {
    pub records: Vec<IterationRecord>,
    pub best_guess: Option<BestGuess>,
    pub surrogate: Option<GpSurrogate>,
    pub traces: Vec<AcquisitionTrace>,
    /// Set when the loop stopped early.
    pub aborted: Option<String>,
}

/// Progress notifications from [`run_tuning_with`].
pub enum TuningEvent<'a> {
    Evaluated { record: &'a IterationRecord, episode: &'a Episode },
    Acquired { iter: usize, trace: &'a AcquisitionTrace },
}

/// Consecutive factorization failures tolerated before the run is aborted.
pub const MAX_CONSECUTIVE_FAILURES: usize = 3;

const STREAM_EPISODE: u64 = 1;
const STREAM_FIT: u64 = 2;
const STREAM_REPRESENTERS: u64 = 3;
const STREAM_SAMPLES: u64 = 4;
const STREAM_CANDIDATES: u64 = 5;
const STREAM_VALIDATION: u64 = 6;

/// Seeds used by one acquisition attempt. Attempts are numbered from 1 and
/// advance on every try, so they match iteration numbers until a
/// factorization failure forces a retry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttemptSeeds {
    pub fit: u64,
    pub representers: u64,
    pub samples: u64,
    pub candidates: u64,
}

impl AttemptSeeds {
    pub fn new(master: u64, attempt: u64) -> Self {
        Self {
            fit: derive_seed(master, STREAM_FIT, attempt),
            representers: derive_seed(master, STREAM_REPRESENTERS, attempt),
            samples: derive_seed(master, STREAM_SAMPLES, attempt),
            candidates: derive_seed(master, STREAM_CANDIDATES, attempt),
        }
    }
}

/// Seed of the episode for the `index`-th evaluation (0-based, initial evaluations first).
pub fn episode_seed(master: u64, index: u64) -> u64 {
    derive_seed(master, STREAM_EPISODE, index)
}

/// Independent seed for `(stream, index)` under `master` (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn run_tuning(config: &TunerConfig) -> Result<TuningRun> {
    run_tuning_with(config, |_| {})
}

/// Initial evaluations, then `n_iterations` rounds of refit, acquisition
/// and evaluation. Deterministic given `config.seed`.
pub fn run_tuning_with<F: FnMut(TuningEvent<'_>)>(config: &TunerConfig, mut observe: F) -> Result<TuningRun> {
    let ctx = config.context()?;
    let domain = &config.design_map.domain;
    let seed = config.seed;
    let mut hyper = config.priors.means(domain.dim());
    let mut data = Dataset::new();
    let mut records = Vec::new();
    let mut traces = Vec::new();
    let mut evaluations = 0u64;

    let mut initial = vec![config.theta0.clone()];
    if config.init_corner_evals {
        initial.extend(domain.corners());
    }
    for theta in initial {
        let clock = Instant::now();
        let episode = cost_episode(&theta, config, &ctx, episode_seed(seed, evaluations))?;
        evaluations += 1;
        data.push(theta.clone(), episode.evaluation.j_hat)?;
        let record = IterationRecord {
            iter: 0,
            theta,
            j_hat: episode.evaluation.j_hat,
            stable: episode.evaluation.stable,
            best_guess: None,
            hyper: hyper.clone(),
            wall_ms: wall_ms(config, clock),
        };
        info!("init theta={:?} j_hat={} stable={}", record.theta, record.j_hat, record.stable);
        observe(TuningEvent::Evaluated { record: &record, episode: &episode });
        records.push(record);
    }

    let mut failures = 0usize;
    let mut attempt = 0u64;
    let mut iter = 1;
    let mut aborted = None;
    while iter <= config.n_iterations {
        let clock = Instant::now();
        attempt += 1;
        let step = acquisition_step(config, &data, &hyper, attempt);
        let (surrogate, reps, trace) = match step {
            Ok(s) => s,
            Err(Error::IllConditioned) => {
                failures += 1;
                warn!("surrogate factorization failed in iteration {iter} ({failures} consecutive)");
                if failures > MAX_CONSECUTIVE_FAILURES {
                    aborted = Some(format!("{failures} consecutive factorization failures in iteration {iter}"));
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        failures = 0;
        hyper = surrogate.hyper().clone();
        observe(TuningEvent::Acquired { iter, trace: &trace });

        let theta = trace.next_theta.clone();
        let bg = reps.points[trace.best_guess_index].clone();
        let bg_mean = surrogate.posterior(&bg).0;
        let episode = cost_episode(&theta, config, &ctx, episode_seed(seed, evaluations))?;
        evaluations += 1;
        data.push(theta.clone(), episode.evaluation.j_hat)?;
        let record = IterationRecord {
            iter,
            theta,
            j_hat: episode.evaluation.j_hat,
            stable: episode.evaluation.stable,
            best_guess: Some(BestGuess { theta: bg, mean: bg_mean }),
            hyper: hyper.clone(),
            wall_ms: wall_ms(config, clock),
        };
        info!(
            "iter {iter} theta={:?} j_hat={} stable={} best_guess={:?}",
            record.theta,
            record.j_hat,
            record.stable,
            record.best_guess.as_ref().map(|b| &b.theta)
        );
        observe(TuningEvent::Evaluated { record: &record, episode: &episode });
        records.push(record);
        traces.push(trace);
        iter += 1;
    }

    let (best_guess, surrogate) = if aborted.is_none() {
        let (bg, gp) = final_best_guess(config, &data, &hyper)?;
        (Some(bg), Some(gp))
    } else {
        let bg = records.iter().rev().find_map(|r| r.best_guess.clone());
        (bg, GpSurrogate::new(hyper.clone(), data.clone()).ok())
    };
    Ok(TuningRun { records, best_guess, surrogate, traces, aborted })
}

fn wall_ms(config: &TunerConfig, clock: Instant) -> u64 {
    if config.record_wall_time {
        clock.elapsed().as_millis() as u64
    } else {
        0
    }
}

fn refit(config: &TunerConfig, data: &Dataset, warm: &Hyperparams, seed: u64) -> Result<GpSurrogate> {
    let fit = fit_map(data, &config.priors, warm, seed)?;
    GpSurrogate::new(fit.hyper, data.clone())
}

fn acquisition_step(
    config: &TunerConfig,
    data: &Dataset,
    warm: &Hyperparams,
    attempt: u64,
) -> Result<(GpSurrogate, RepresenterSet, AcquisitionTrace)> {
    let acq = &config.acquisition;
    let domain = &config.design_map.domain;
    let seeds = AttemptSeeds::new(config.seed, attempt);
    let surrogate = refit(config, data, warm, seeds.fit)?;
    let reps = build_representers(domain, &surrogate, acq.n_representers, seeds.representers)?;
    let candidates = acquisition_candidates(&reps, acq, domain, seeds.candidates);
    let (_, trace) = select_next(&surrogate, &reps, &candidates, acq, seeds.samples)?;
    Ok((surrogate, reps, trace))
}

/// Representers scored as candidates: all of them, or an evenly strided
/// subset that covers both the uniform and the EI-weighted half, followed by
/// any extra uniform draws.
pub fn acquisition_candidates(reps: &RepresenterSet, acq: &AcquisitionConfig, domain: &Domain, seed: u64) -> Vec<Vec<f64>> {
    use rand::SeedableRng;
    let m = reps.len();
    let k = acq.n_candidates.map_or(m, |k| k.min(m));
    let mut out: Vec<Vec<f64>> = (0..k).map(|i| reps.points[i * m / k].clone()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    out.extend((0..acq.extra_candidates).map(|_| domain.sample_uniform(&mut rng)));
    out
}

/// Refit on the full dataset and take the `p_min` argmax once more, so the
/// last evaluation also informs the returned best guess.
fn final_best_guess(config: &TunerConfig, data: &Dataset, warm: &Hyperparams) -> Result<(BestGuess, GpSurrogate)> {
    let seeds = AttemptSeeds::new(config.seed, u64::MAX);
    let surrogate = refit(config, data, warm, seeds.fit)?;
    let reps = build_representers(&config.design_map.domain, &surrogate, config.acquisition.n_representers, seeds.representers)?;
    let pmin = crate::entropy::approximate_pmin(&surrogate, &reps, config.acquisition.n_samples, seeds.samples)?;
    let theta = reps.points[pmin.argmax()].clone();
    let mean = surrogate.posterior(&theta).0;
    Ok((BestGuess { theta, mean }, surrogate))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single episode.
    pub std: f64,
    pub stable_count: usize,
    pub evaluations: Vec<CostEvaluation>,
}

/// `n_episodes` independent episodes at `theta`, seeded from `seed`.
pub fn validate_controller(theta: &[f64], config: &TunerConfig, n_episodes: usize, seed: u64) -> Result<ValidationSummary> {
    if n_episodes == 0 {
        return Err(Error::InvalidParameter("n_episodes must be at least 1".into()));
    }
    let ctx = config.context()?;
    config.design_map.domain.check(theta)?;
    let evaluations = (0..n_episodes as u64)
        .map(|i| cost_evaluation(theta, config, &ctx, derive_seed(seed, STREAM_VALIDATION, i)))
        .collect::<Result<Vec<_>>>()?;
    let n = evaluations.len() as f64;
    let mean = evaluations.iter().map(|e| e.j_hat).sum::<f64>() / n;
    let std = if evaluations.len() > 1 {
        (evaluations.iter().map(|e| (e.j_hat - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let stable_count = evaluations.iter().filter(|e| e.stable).count();
    Ok(ValidationSummary { mean, std, stable_count, evaluations })
}

/// Header of `history.csv` for a `dim`-parameter run.
pub fn history_header(dim: usize) -> String {
    let mut cols = vec!["iter".to_string()];
    cols.extend((1..=dim).map(|i| format!("theta{i}")));
    cols.extend(["j_hat".into(), "stable".into()]);
    cols.extend((1..=dim).map(|i| format!("bg_theta{i}")));
    cols.push("bg_mean".into());
    cols.extend((1..=dim).map(|i| format!("lambda{i}")));
    cols.extend(["sigma".into(), "sigma_n".into(), "wall_ms".into()]);
    cols.join(",")
}

/// Best-guess fields are left empty on initial-evaluation rows.
pub fn write_history<W: Write>(mut out: W, dim: usize, records: &[IterationRecord]) -> Result<()> {
    writeln!(out, "{}", history_header(dim))?;
    for r in records {
        let mut fields = vec![r.iter.to_string()];
        fields.extend(r.theta.iter().map(f64::to_string));
        fields.push(r.j_hat.to_string());
        fields.push(r.stable.to_string());
        match &r.best_guess {
            Some(bg) => {
                fields.extend(bg.theta.iter().map(f64::to_string));
                fields.push(bg.mean.to_string());
            }
            None => fields.extend(std::iter::repeat_n(String::new(), dim + 1)),
        }
        fields.extend(r.hyper.lengthscales.iter().map(f64::to_string));
        fields.push(r.hyper.signal_std.to_string());
        fields.push(r.hyper.noise_std.to_string());
        fields.push(r.wall_ms.to_string());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Diagonal of a square matrix as a vector; used by reports.
pub fn diagonal(m: &DMatrix<f64>) -> Vec<f64> {
    m.diagonal().iter().copied().collect()
}
