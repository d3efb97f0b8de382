use lqr_autotune::entropy::{approximate_pmin, build_representers};
use lqr_autotune::gp::{Dataset, GpSurrogate};
use lqr_autotune::plant::SafetyLimits;
use lqr_autotune::presets::Preset;
use lqr_autotune::tuner::{
    cost_evaluation, run_tuning, validate_controller, write_history, AttemptSeeds, TunerConfig,
};

/// A preset shrunk so a whole run takes a fraction of a second.
fn quick(preset: Preset, iterations: usize, corners: bool) -> TunerConfig {
    let mut c = preset.config();
    c.n_iterations = iterations;
    c.init_corner_evals = corners;
    c.episode.horizon_s = 2.0;
    c.episode.burn_in_s = 0.5;
    c.acquisition.n_representers = 30;
    c.acquisition.n_samples = 200;
    c.acquisition.quadrature_order = 5;
    c.seed = 42;
    c
}

#[test]
fn one_iteration_without_corners_evaluates_twice() {
    let run = run_tuning(&quick(Preset::Good2d, 1, false)).unwrap();
    assert_eq!(run.records.len(), 2);
    assert_eq!(run.records[0].iter, 0);
    assert_eq!(run.records[1].iter, 1);
    assert!(run.aborted.is_none());
}

#[test]
fn corners_add_four_initial_evaluations() {
    let cfg = quick(Preset::Good2d, 2, true);
    let run = run_tuning(&cfg).unwrap();
    let initial: Vec<_> = run.records.iter().filter(|r| r.iter == 0).collect();
    assert_eq!(initial.len(), 5);
    assert_eq!(initial[0].theta, cfg.theta0);
    assert!(initial.iter().all(|r| r.best_guess.is_none()));
    assert_eq!(run.records.len(), 7);
    assert_eq!(run.surrogate.unwrap().data().len(), 7);
}

#[test]
fn history_invariants() {
    let mut cfg = quick(Preset::Good2d, 4, true);
    // Tight limits so that some evaluations fail.
    cfg.safety = SafetyLimits { s_max: 0.02, ..SafetyLimits::default() };
    let run = run_tuning(&cfg).unwrap();
    let domain = &cfg.design_map.domain;
    let initial = run.records.iter().filter(|r| r.iter == 0).count();
    assert!(run.records.iter().any(|r| !r.stable));
    for r in &run.records {
        assert!(domain.contains(&r.theta));
        assert_eq!(r.stable, r.j_hat != cfg.episode.j_unstable, "{r:?}");
        if let Some(bg) = &r.best_guess {
            assert!(domain.contains(&bg.theta));
        }
    }

    // Recompute every best guess from the data available at that iteration.
    for (i, r) in run.records.iter().enumerate().skip(initial) {
        let seeds = AttemptSeeds::new(cfg.seed, r.iter as u64);
        let prefix = &run.records[..i];
        assert_eq!(prefix.len(), initial + r.iter - 1);
        let data = Dataset::from_points(
            prefix.iter().map(|p| p.theta.clone()).collect(),
            prefix.iter().map(|p| p.j_hat).collect(),
        )
        .unwrap();
        let gp = GpSurrogate::new(r.hyper.clone(), data).unwrap();
        let reps = build_representers(domain, &gp, cfg.acquisition.n_representers, seeds.representers).unwrap();
        let pmin = approximate_pmin(&gp, &reps, cfg.acquisition.n_samples, seeds.samples).unwrap();
        assert_eq!(r.best_guess.as_ref().unwrap().theta, reps.points[pmin.argmax()]);
    }
    for t in &run.traces {
        assert!((t.pmin.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn same_seed_same_history() {
    let cfg = quick(Preset::Good2d, 3, true);
    let (a, b) = (run_tuning(&cfg).unwrap(), run_tuning(&cfg).unwrap());
    assert_eq!(a.records, b.records);
    assert_eq!(a.best_guess, b.best_guess);
    let csv = |records| {
        let mut out = Vec::new();
        write_history(&mut out, 2, records).unwrap();
        out
    };
    assert_eq!(csv(&a.records), csv(&b.records));
    let other = run_tuning(&TunerConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(other.records, a.records);
}

#[test]
fn four_d_run_without_corners() {
    let run = run_tuning(&quick(Preset::Poor4d, 2, false)).unwrap();
    assert_eq!(run.records.len(), 3);
    assert_eq!(run.records[0].theta, vec![1.0, 4.0, 1.0, 8.0]);
}

#[test]
fn nominal_design_is_stable_on_accurate_model() {
    let cfg = quick(Preset::Good2d, 1, false);
    let ctx = cfg.context().unwrap();
    assert!(cost_evaluation(&[2.0, 4.0], &cfg, &ctx, 0).unwrap().stable);
}

#[test]
fn noise_free_resting_validation_has_zero_spread() {
    let mut cfg = quick(Preset::Good2d, 1, false);
    cfg.episode.noise = lqr_autotune::plant::NoiseConfig::none();
    cfg.episode.initial_state = Some(Default::default());
    let v = validate_controller(&[2.0, 4.0], &cfg, 3, 1).unwrap();
    assert_eq!(v.std, 0.0);
    assert_eq!(v.stable_count, 3);
}

/// The nominal design is expected to fail on the long pole. See the
/// acceptance suite and the README for why this does not happen in the
/// simulated plant.
#[test]
fn nominal_design_fails_on_long_pole() {
    for (preset, j_u) in [(Preset::Poor2d, 3.0), (Preset::Poor4d, 5.0)] {
        let cfg = preset.config();
        let ctx = cfg.context().unwrap();
        let e = cost_evaluation(&cfg.theta0, &cfg, &ctx, 0).unwrap();
        assert!(!e.stable, "{preset}: theta0 stable with j_hat {}", e.j_hat);
        assert_eq!(e.j_hat, j_u);
    }
}
