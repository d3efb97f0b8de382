use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lqr-autotune");

/// Flags that shrink a tuning run to well under a second per iteration.
const QUICK: [&str; 8] = ["--horizon", "2", "--burn-in", "0.5", "--representers", "20", "--samples", "100"];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("LQR_AUTOTUNE_OUT").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn history(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("history.csv")).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn tune_good2d_writes_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut args = vec!["tune", "--preset", "good2d", "--iterations", "20", "--seed", "7", "--out", out.to_str().unwrap()];
    args.extend(QUICK);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = history(&out);
    assert_eq!(rows[0], "iter,theta1,theta2,j_hat,stable,bg_theta1,bg_theta2,bg_mean,lambda1,lambda2,sigma,sigma_n,wall_ms");
    assert_eq!(rows.len() - 1, 25);
    assert_eq!(rows[1].split(',').count(), 13);
    for name in ["config.json", "surrogate_final.json", "acquisition_trace.jsonl"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    assert_eq!(fs::read_to_string(out.join("acquisition_trace.jsonl")).unwrap().lines().count(), 20);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("iter")).count(), 25);
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 7);
    assert_eq!(config["n_iterations"], 20);
}

#[test]
fn tune_is_deterministic_and_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let mut args = vec!["tune", "--preset", "poor2d", "--iterations", "2", "--seed", "3", "--out", dir.to_str().unwrap()];
        args.extend(QUICK);
        assert_eq!(run(&args).status.code(), Some(0));
    }
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());

    // The resolved config reproduces the run on its own.
    let c = tmp.path().join("c");
    let o = run(&["tune", "--config", a.join("config.json").to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(c.join("history.csv")).unwrap());
}

#[test]
fn tune_saves_trajectories_and_honours_env_out() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("env-run");
    let mut args = vec!["tune", "--preset", "good2d", "--iterations", "1", "--corners", "false", "--save-trajectories"];
    args.extend(QUICK);
    let o = Command::new(BIN).args(&args).env("LQR_AUTOTUNE_OUT", &out).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(history(&out).len(), 3);
    let trajectories = fs::read_dir(out.join("trajectories")).unwrap().count();
    assert_eq!(trajectories, 2);
    let first = fs::read_to_string(out.join("trajectories/eval_000.csv")).unwrap();
    assert!(first.starts_with("k,t,psi,psi_dot,s,s_dot,z,u\n"));
}

/// The nominal design is expected to fail on the long pole; see the README.
#[test]
fn tune_poor4d_starts_unstable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut args = vec!["tune", "--preset", "poor4d", "--iterations", "1", "--seed", "1", "--out", out.to_str().unwrap()];
    args.extend(QUICK);
    assert_eq!(run(&args).status.code(), Some(0));
    let rows = history(&out);
    let fields: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(&fields[..5], &["0", "1", "4", "1", "8"]);
    assert_eq!((fields[6], fields[5]), ("false", "5"), "theta0 row: {}", rows[1]);
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let o = run(&["tune", "--config", "/nonexistent/config.json", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    assert_eq!(run(&["tune", "--out", out.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["tune", "--preset", "nope"]).status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let tmp = tempfile::NamedTempFile::new().unwrap();
    let out = tmp.path().join("below-a-file");
    let mut args = vec!["tune", "--preset", "good2d", "--iterations", "1", "--out", out.to_str().unwrap()];
    args.extend(QUICK);
    assert_eq!(run(&args).status.code(), Some(1));
}

#[test]
fn validate_good2d_nominal() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("v.csv");
    let o = run(&["validate", "--preset", "good2d", "--theta", "2,4", "--episodes", "5", "--horizon", "10", "--burn-in", "2", "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("stable 5/5"), "{text}");
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 6);
    assert!(rows.lines().skip(1).all(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap().is_finite()));
}

/// Expected to report the penalty for every episode; see the README.
#[test]
fn validate_poor2d_nominal_is_unstable() {
    let o = run(&["validate", "--preset", "poor2d", "--theta", "2,4", "--episodes", "5", "--horizon", "10", "--burn-in", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("J = 3.0000 ± 0.0000  stable 0/5"), "{text}");
}

#[test]
fn validate_single_episode_reports_zero_spread() {
    let o = run(&["validate", "--preset", "good2d", "--theta", "2,4", "--episodes", "1", "--horizon", "3", "--burn-in", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("± 0.0000"), "{}", stdout(&o));
}

#[test]
fn validate_rejects_out_of_domain() {
    assert_eq!(run(&["validate", "--preset", "good2d", "--theta", "20,4"]).status.code(), Some(2));
    assert_eq!(run(&["validate", "--preset", "good2d", "--theta", "2,4,1"]).status.code(), Some(2));
}

fn simulate(extra: &[&str]) -> (Output, Vec<String>) {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("t.csv");
    let mut args = vec!["simulate", "--preset", "good2d", "--out", path.to_str().unwrap()];
    args.extend(extra);
    let o = run(&args);
    let rows = fs::read_to_string(&path).map(|t| t.lines().map(str::to_owned).collect()).unwrap_or_default();
    (o, rows)
}

fn column(row: &str, i: usize) -> f64 {
    row.split(',').nth(i).unwrap().parse().unwrap()
}

#[test]
fn simulate_zero_duration_is_header_only() {
    let (o, rows) = simulate(&["--theta", "2,4", "--duration", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(rows, vec!["k,t,psi,psi_dot,s,s_dot,z,u"]);
}

#[test]
fn simulate_stable_controller_full_horizon() {
    let (o, rows) = simulate(&["--theta", "2,4", "--duration", "120", "--downsample", "100"]);
    assert_eq!(o.status.code(), Some(0));
    let last = rows.last().unwrap();
    assert_eq!(column(last, 0), 119_999.0);
    assert!(column(last, 2).abs() < 0.35);
}

#[test]
fn simulate_zero_gain_stops_at_violation() {
    let (o, rows) = simulate(&["--gain", "zero", "--duration", "30"]);
    assert_eq!(o.status.code(), Some(0));
    let last = rows.last().unwrap();
    assert!(column(last, 2).abs() > 0.35, "{last}");
    assert!(rows[rows.len() - 2].split(',').nth(2).unwrap().parse::<f64>().unwrap().abs() <= 0.35);
    assert!(rows.len() < 30_001);
}

#[test]
fn simulate_explicit_gain_and_determinism() {
    let gain = "50.5,7.7,1.0,1.5";
    let (a, ra) = simulate(&["--gain", gain, "--duration", "2", "--seed", "9"]);
    let (_, rb) = simulate(&["--gain", gain, "--duration", "2", "--seed", "9"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(ra, rb);
    let (bad, _) = simulate(&["--gain", "1,2,3"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn config_prints_preset() {
    let o = run(&["config", "--preset", "poor4d"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["theta0"], serde_json::json!([1.0, 4.0, 1.0, 8.0]));
    assert_eq!(v["episode"]["j_unstable"], 5.0);
}
