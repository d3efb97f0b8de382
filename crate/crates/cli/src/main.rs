//! lqr-autotune: run tuning experiments, validate controllers, export
//! trajectories.
//!
//!   lqr-autotune tune --preset good2d --iterations 20 --seed 7 --out runs/good2d
//!   lqr-autotune validate --preset poor2d --theta 2,4 --episodes 5
//!   lqr-autotune simulate --preset good2d --gain zero --duration 10 --out zero.csv
//!   lqr-autotune config --preset poor4d > poor4d.json

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use lqr_autotune::artifact::ArtifactWriter;
use lqr_autotune::lqr::ControllerGain;
use lqr_autotune::plant::{run_episode, N_STATES};
use lqr_autotune::presets::Preset;
use lqr_autotune::tuner::{run_tuning_with, synthesize, validate_controller, TunerConfig, TuningEvent};

#[derive(Parser)]
#[command(name = "lqr-autotune", version, about = "Automatic LQR tuning with Entropy Search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the tuning loop and write a run directory.
    Tune(TuneArgs),
    /// Evaluate one parameter vector over several episodes.
    Validate(ValidateArgs),
    /// Run one episode and write its trajectory as CSV.
    Simulate(SimulateArgs),
    /// Print the resolved configuration as JSON.
    Config(SourceArgs),
}

#[derive(Args)]
struct SourceArgs {
    /// Built-in experiment: good2d, poor2d or poor4d.
    #[arg(long, conflicts_with = "config")]
    preset: Option<Preset>,
    /// JSON configuration file (see the `config` subcommand for the schema).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Episode length in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    /// Cost-free initial window in seconds.
    #[arg(long)]
    burn_in: Option<f64>,
    /// Penalty for an episode stopped by the safety limits.
    #[arg(long)]
    j_unstable: Option<f64>,
    /// Integrator gain.
    #[arg(long, allow_negative_numbers = true)]
    fz: Option<f64>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    iterations: Option<usize>,
    /// Initial parameters, comma separated.
    #[arg(long)]
    theta0: Option<String>,
    /// Evaluate the domain corners before the loop.
    #[arg(long)]
    corners: Option<bool>,
    #[arg(long)]
    representers: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Representers scored per iteration (default: preset value).
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long, env = "LQR_AUTOTUNE_OUT", default_value = "lqr-autotune-run")]
    out: PathBuf,
    #[arg(long)]
    save_trajectories: bool,
    /// Store measured wall time in history.csv (makes it non-reproducible).
    #[arg(long)]
    record_wall_time: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Parameters to validate, comma separated.
    #[arg(long)]
    theta: String,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    /// Per-episode results as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Synthesize the gain for these parameters.
    #[arg(long, conflicts_with = "gain", required_unless_present = "gain")]
    theta: Option<String>,
    /// Explicit gain: `zero` or four comma-separated entries of F.
    #[arg(long, allow_hyphen_values = true)]
    gain: Option<String>,
    /// Simulated time in seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    downsample: usize,
}

/// Usage and configuration problems exit with 2, runtime failures with 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<lqr_autotune::Error> for Failure {
    fn from(e: lqr_autotune::Error) -> Self {
        use lqr_autotune::Error::*;
        match e {
            Dimension(_) | InvalidWeights(_) | OutOfDomain(_) | InvalidParameter(_) | Json(_) => Failure::Usage(e.into()),
            NonConvergence { .. } | IllConditioned | Io(_) => Failure::Runtime(e.into()),
        }
    }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tune(a) => tune(a),
        Command::Validate(a) => validate(a),
        Command::Simulate(a) => simulate(a),
        Command::Config(a) => print_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve(source: &SourceArgs) -> Result<TunerConfig, Failure> {
    let mut config = match (&source.preset, &source.config) {
        (_, Some(path)) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))
                .map_err(usage)?;
            serde_json::from_str(&text)
                .with_context(|| format!("cannot parse config file {}", path.display()))
                .map_err(usage)?
        }
        (Some(p), None) => p.config(),
        (None, None) => return Err(usage(anyhow!("either --preset or --config is required"))),
    };
    if let Some(s) = source.seed {
        config.seed = s;
    }
    if let Some(h) = source.horizon {
        config.episode.horizon_s = h;
    }
    if let Some(b) = source.burn_in {
        config.episode.burn_in_s = b;
    }
    if let Some(j) = source.j_unstable {
        config.episode.j_unstable = j;
    }
    if let Some(fz) = source.fz {
        config.fz = fz;
    }
    Ok(config)
}

fn parse_list(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| anyhow!("invalid number {t:?}: {e}")))
        .collect()
}

fn fmt_theta(theta: &[f64]) -> String {
    let parts: Vec<String> = theta.iter().map(|v| format!("{v:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn tune(args: TuneArgs) -> Result<(), Failure> {
    let mut config = resolve(&args.source)?;
    if let Some(n) = args.iterations {
        config.n_iterations = n;
    }
    if let Some(t) = &args.theta0 {
        config.theta0 = parse_list(t).map_err(usage)?;
    }
    if let Some(c) = args.corners {
        config.init_corner_evals = c;
    }
    if let Some(m) = args.representers {
        config.acquisition.n_representers = m;
    }
    if let Some(s) = args.samples {
        config.acquisition.n_samples = s;
    }
    if let Some(c) = args.candidates {
        config.acquisition.n_candidates = Some(c);
    }
    config.record_wall_time |= args.record_wall_time;
    config.validate()?;

    let mut writer = ArtifactWriter::create(&args.out, &config, args.save_trajectories)?;
    let mut write_error = None;
    let stdout = io::stdout();
    let run = run_tuning_with(&config, |event| {
        if let TuningEvent::Evaluated { record, .. } = &event {
            let bg = record.best_guess.as_ref().map_or("-".to_string(), |b| fmt_theta(&b.theta));
            let _ = writeln!(
                stdout.lock(),
                "iter {:>3}  theta {}  j_hat {:.6}  stable {}  best_guess {}",
                record.iter,
                fmt_theta(&record.theta),
                record.j_hat,
                record.stable,
                bg
            );
        }
        if write_error.is_none() {
            write_error = writer.record(&event).err();
        }
    })?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    writer.finish(&config, &run)?;
    if let Some(reason) = run.aborted {
        return Err(runtime(anyhow!("run aborted: {reason}; partial history in {}", args.out.display())));
    }
    if let Some(bg) = &run.best_guess {
        println!("best guess {}  predicted mean {:.6}", fmt_theta(&bg.theta), bg.mean);
    }
    println!("artifacts written to {}", args.out.display());
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<(), Failure> {
    let config = resolve(&args.source)?;
    config.validate()?;
    let theta = parse_list(&args.theta).map_err(usage)?;
    if theta.len() != config.design_map.dim() {
        return Err(usage(anyhow!(
            "--theta has {} entries, the design map expects {}",
            theta.len(),
            config.design_map.dim()
        )));
    }
    let summary = validate_controller(&theta, &config, args.episodes, config.seed)?;
    if let Some(path) = &args.csv {
        write_validation_csv(path, &summary).map_err(runtime)?;
    }
    println!("theta {}  J = {:.4} ± {:.4}  stable {}/{}", fmt_theta(&theta), summary.mean, summary.std, summary.stable_count, args.episodes);
    Ok(())
}

fn write_validation_csv(path: &Path, summary: &lqr_autotune::tuner::ValidationSummary) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "episode,j_hat,stable,violation")?;
    for (i, e) in summary.evaluations.iter().enumerate() {
        let violation = e.violation.map(|v| format!("{v:?}").to_lowercase()).unwrap_or_default();
        writeln!(out, "{i},{},{},{violation}", e.j_hat, e.stable)?;
    }
    out.flush()?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut config = resolve(&args.source)?;
    if !(args.duration >= 0.0) {
        return Err(usage(anyhow!("--duration must be nonnegative")));
    }
    if args.downsample == 0 {
        return Err(usage(anyhow!("--downsample must be at least 1")));
    }
    config.episode.horizon_s = args.duration;
    config.episode.burn_in_s = 0.0;
    let ctx = config.context()?;
    let gain = match (&args.theta, &args.gain) {
        (Some(t), _) => synthesize(&parse_list(t).map_err(usage)?, &config, &ctx)?,
        (None, Some(g)) if g == "zero" => ControllerGain::zero(1, N_STATES),
        (None, Some(g)) => {
            let f = parse_list(g).map_err(usage)?;
            if f.len() != N_STATES {
                return Err(usage(anyhow!("--gain needs {N_STATES} entries, got {}", f.len())));
            }
            ControllerGain::from_row(&f, config.fz)?
        }
        (None, None) => return Err(usage(anyhow!("either --theta or --gain is required"))),
    };
    let episode = run_episode(&gain, &config.plant, &config.episode, &ctx.performance, &config.safety, config.seed)?;
    match &args.out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("cannot create {}", path.display())).map_err(runtime)?;
            episode.trajectory.write_csv(BufWriter::new(file), args.downsample)?;
        }
        None => episode.trajectory.write_csv(io::stdout().lock(), args.downsample)?,
    }
    let e = &episode.evaluation;
    eprintln!("steps {}  stable {}  j_hat {:.6}", e.steps_run, e.stable, e.j_hat);
    Ok(())
}

fn print_config(args: SourceArgs) -> Result<(), Failure> {
    let config = resolve(&args)?;
    config.validate()?;
    println!("{}", serde_json::to_string_pretty(&config).map_err(runtime)?);
    Ok(())
}
