//! Nonlinear balancing-pole plant, its linearization, and cost episodes.
//!
//! The pole angle `psi` is measured from the upright position and the input
//! `u` is the commanded end-effector acceleration:
//!
//! ```text
//! psi'' = (g / r) sin(psi) - (cos(psi) / r) u - xi / (m r^2) psi'
//! s''   = u
//! z'    = s
//! ```

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqr::{ControllerGain, NominalModel, WeightPair};

/// Number of physical states `[psi, psi_dot, s, s_dot]`.
pub const N_STATES: usize = 4;

pub const TRAJECTORY_HEADER: &str = "k,t,psi,psi_dot,s,s_dot,z,u";

/// Physical constants of a balancing pole.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoleParams {
    /// Mass, kg.
    pub m: f64,
    /// Distance from the joint to the center of mass, m.
    pub r: f64,
    /// Joint friction, N m s.
    pub xi: f64,
    /// Gravity, m/s^2.
    pub g: f64,
}

impl PoleParams {
    pub fn short_pole() -> Self {
        Self { m: 0.27, r: 0.33, xi: 0.012, g: 9.81 }
    }

    /// The long pole's friction is not reported; the short pole's value is reused.
    pub fn long_pole() -> Self {
        Self { m: 0.29, r: 0.64, xi: 0.012, g: 9.81 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.m > 0.0 && self.r > 0.0 && self.xi >= 0.0 && self.g > 0.0;
        let finite = [self.m, self.r, self.xi, self.g].iter().all(|v| v.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid pole parameters {self:?}")))
        }
    }
}

/// Plant state plus the controller's integrator state `z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub psi: f64,
    pub psi_dot: f64,
    pub s: f64,
    pub s_dot: f64,
    pub z: f64,
}

impl PlantState {
    pub fn with_angle(psi: f64) -> Self {
        Self { psi, ..Self::default() }
    }

    /// The physical state vector `[psi, psi_dot, s, s_dot]`.
    pub fn physical(&self) -> [f64; N_STATES] {
        [self.psi, self.psi_dot, self.s, self.s_dot]
    }

    pub fn is_finite(&self) -> bool {
        [self.psi, self.psi_dot, self.s, self.s_dot, self.z].iter().all(|v| v.is_finite())
    }

    fn axpy(&self, h: f64, d: &PlantState) -> PlantState {
        PlantState {
            psi: self.psi + h * d.psi,
            psi_dot: self.psi_dot + h * d.psi_dot,
            s: self.s + h * d.s,
            s_dot: self.s_dot + h * d.s_dot,
            z: self.z + h * d.z,
        }
    }
}

/// Time derivative of the augmented state under a constant input `u`.
pub fn pole_derivatives(state: &PlantState, u: f64, params: &PoleParams) -> PlantState {
    let PoleParams { m, r, xi, g } = *params;
    PlantState {
        psi: state.psi_dot,
        psi_dot: (g / r) * state.psi.sin() - (state.psi.cos() / r) * u - xi / (m * r * r) * state.psi_dot,
        s: state.s_dot,
        s_dot: u,
        z: state.s,
    }
}

/// Classic fourth-order Runge-Kutta step with `u` held over the interval.
pub fn rk4_step(state: &PlantState, u: f64, params: &PoleParams, dt: f64) -> PlantState {
    let k1 = pole_derivatives(state, u, params);
    let k2 = pole_derivatives(&state.axpy(0.5 * dt, &k1), u, params);
    let k3 = pole_derivatives(&state.axpy(0.5 * dt, &k2), u, params);
    let k4 = pole_derivatives(&state.axpy(dt, &k3), u, params);
    PlantState {
        psi: state.psi + dt / 6.0 * (k1.psi + 2.0 * k2.psi + 2.0 * k3.psi + k4.psi),
        psi_dot: state.psi_dot + dt / 6.0 * (k1.psi_dot + 2.0 * k2.psi_dot + 2.0 * k3.psi_dot + k4.psi_dot),
        s: state.s + dt / 6.0 * (k1.s + 2.0 * k2.s + 2.0 * k3.s + k4.s),
        s_dot: state.s_dot + dt / 6.0 * (k1.s_dot + 2.0 * k2.s_dot + 2.0 * k3.s_dot + k4.s_dot),
        z: state.z + dt / 6.0 * (k1.z + 2.0 * k2.z + 2.0 * k3.z + k4.z),
    }
}

/// Mechanical energy of the pole alone, `1/2 m r^2 psi'^2 + m g r cos(psi)`.
pub fn pole_energy(state: &PlantState, params: &PoleParams) -> f64 {
    let PoleParams { m, r, g, .. } = *params;
    0.5 * m * r * r * state.psi_dot * state.psi_dot + m * g * r * state.psi.cos()
}

/// Continuous-time Jacobian about the upright equilibrium.
pub fn continuous_linearization(params: &PoleParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let PoleParams { m, r, xi, g } = *params;
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        0.0,   1.0,                0.0, 0.0,
        g / r, -xi / (m * r * r),  0.0, 0.0,
        0.0,   0.0,                0.0, 1.0,
        0.0,   0.0,                0.0, 0.0,
    ]);
    let b = DMatrix::from_column_slice(4, 1, &[0.0, -1.0 / r, 0.0, 1.0]);
    (a, b)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.abs().row_sum().max();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = m / 2f64.powi(squarings);

    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=30 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.norm() <= f64::EPSILON * result.norm() {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Zero-order-hold discretization via the exponential of `[A B; 0 0] dt`.
pub fn zoh_discretize(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (nx, nu) = (a.nrows(), b.ncols());
    let mut block = DMatrix::<f64>::zeros(nx + nu, nx + nu);
    block.view_mut((0, 0), (nx, nx)).copy_from(&(a * dt));
    block.view_mut((0, nx), (nx, nu)).copy_from(&(b * dt));
    let e = expm(&block);
    (e.view((0, 0), (nx, nx)).into_owned(), e.view((0, nx), (nx, nu)).into_owned())
}

pub fn linearize_and_discretize(params: &PoleParams, dt: f64) -> Result<NominalModel> {
    params.validate()?;
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("sampling time {dt} must be positive")));
    }
    let (a, b) = continuous_linearization(params);
    let (ad, bd) = zoh_discretize(&a, &b, dt);
    NominalModel::new(ad, bd, dt)
}

/// Which safety bound an episode exceeded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyViolation {
    Position,
    Input,
    Angle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyLimits {
    /// End-effector position bound, m.
    pub s_max: f64,
    /// Acceleration bound, m/s^2.
    pub u_max: f64,
    /// Pole angle bound, rad.
    pub psi_max: f64,
}

impl Default for SafetyLimits {
    fn default() -> Self {
        Self { s_max: 0.5, u_max: 5.0, psi_max: 0.35 }
    }
}

impl SafetyLimits {
    pub fn validate(&self) -> Result<()> {
        if [self.s_max, self.u_max, self.psi_max].iter().all(|v| *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("safety limits must be positive".into()))
        }
    }
}

/// Bounds are inclusive: a value exactly on the limit is allowed.
pub fn check_safety(state: &PlantState, u: f64, limits: &SafetyLimits) -> Option<SafetyViolation> {
    if !(state.s.abs() <= limits.s_max) {
        Some(SafetyViolation::Position)
    } else if !(u.abs() <= limits.u_max) {
        Some(SafetyViolation::Input)
    } else if !(state.psi.abs() <= limits.psi_max) {
        Some(SafetyViolation::Angle)
    } else {
        None
    }
}

/// Additive Gaussian noise on the angle measurements fed to the controller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub psi_std: f64,
    pub psi_dot_std: f64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { psi_std: 0.0, psi_dot_std: 0.0 }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { psi_std: 1e-3, psi_dot_std: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Control and integration step, s.
    pub dt: f64,
    /// Episode length, s.
    pub horizon_s: f64,
    /// Initial window excluded from the cost, s.
    pub burn_in_s: f64,
    /// Half-width of the uniform initial angle distribution, rad.
    pub initial_psi_range: f64,
    /// Fixed initial state; overrides `initial_psi_range` when set.
    pub initial_state: Option<PlantState>,
    pub noise: NoiseConfig,
    /// Cost assigned to an episode stopped by a safety violation.
    pub j_unstable: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon_s: 120.0,
            burn_in_s: 30.0,
            initial_psi_range: 0.02,
            initial_state: None,
            noise: NoiseConfig::default(),
            j_unstable: 3.0,
        }
    }
}

impl EpisodeConfig {
    pub fn steps(&self) -> usize {
        (self.horizon_s / self.dt).round() as usize
    }

    pub fn burn_in_steps(&self) -> usize {
        (self.burn_in_s / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.dt > 0.0 && self.horizon_s >= 0.0 && self.burn_in_s >= 0.0;
        let noise_ok = self.noise.psi_std >= 0.0 && self.noise.psi_dot_std >= 0.0;
        if !(positive && noise_ok && self.initial_psi_range >= 0.0 && self.j_unstable > 0.0) {
            return Err(Error::InvalidParameter(format!("invalid episode configuration {self:?}")));
        }
        let k = self.steps();
        if k > 0 && self.burn_in_steps() >= k {
            return Err(Error::InvalidParameter(format!(
                "burn-in of {} s leaves no cost window in a {} s horizon",
                self.burn_in_s, self.horizon_s
            )));
        }
        Ok(())
    }
}

/// Outcome of one finite-horizon cost evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEvaluation {
    /// Per-step average cost over the post-burn-in window, or `j_unstable`.
    pub j_hat: f64,
    pub stable: bool,
    pub steps_run: usize,
    pub failure_step: Option<usize>,
    pub violation: Option<SafetyViolation>,
}

impl CostEvaluation {
    pub fn unstable(j_unstable: f64, steps_run: usize, failure_step: Option<usize>) -> Self {
        Self { j_hat: j_unstable, stable: false, steps_run, failure_step, violation: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub k: usize,
    pub t: f64,
    pub state: PlantState,
    /// Input applied over `[t, t + dt)`; on the failing step, the commanded input.
    pub u: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    /// Write `k,t,psi,psi_dot,s,s_dot,z,u`, keeping every `downsample`-th row
    /// and always the final one.
    pub fn write_csv<W: Write>(&self, mut out: W, downsample: usize) -> Result<()> {
        let step = downsample.max(1);
        writeln!(out, "{TRAJECTORY_HEADER}")?;
        let last = self.rows.len().saturating_sub(1);
        for (i, row) in self.rows.iter().enumerate() {
            if i % step != 0 && i != last {
                continue;
            }
            let s = &row.state;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                row.k, row.t, s.psi, s.psi_dot, s.s, s.s_dot, s.z, row.u
            )?;
        }
        Ok(())
    }
}

/// A simulated episode: its cost evaluation and the logged trajectory.
#[derive(Clone, Debug)]
pub struct Episode {
    pub evaluation: CostEvaluation,
    pub trajectory: Trajectory,
}

/// `x' Q x + u' R u` for the physical state, summed in row-major order.
pub fn stage_cost(x: &[f64; N_STATES], u: f64, perf: &WeightPair) -> f64 {
    let q = perf.wx();
    let mut acc = 0.0;
    for i in 0..N_STATES {
        for j in 0..N_STATES {
            acc += x[i] * q[(i, j)] * x[j];
        }
    }
    acc + u * perf.wu()[(0, 0)] * u
}

/// Run one closed-loop episode on the nonlinear plant.
///
/// The controller sees the state corrupted by measurement noise and applies
/// `u_k = F x_k + Fz z_k`, held constant over each step. The cost uses the
/// true physical state and excludes the integrator. A safety violation stops
/// the episode and assigns `config.j_unstable`.
pub fn run_episode(
    gain: &ControllerGain,
    params: &PoleParams,
    config: &EpisodeConfig,
    perf: &WeightPair,
    limits: &SafetyLimits,
    rng_seed: u64,
) -> Result<Episode> {
    if gain.f.nrows() != 1 || gain.f.ncols() != N_STATES {
        return Err(Error::Dimension(format!(
            "pole gain must be 1x{N_STATES}, got {}x{}",
            gain.f.nrows(),
            gain.f.ncols()
        )));
    }
    if perf.wx().nrows() != N_STATES || perf.wu().nrows() != 1 {
        return Err(Error::Dimension("performance weights must be 4x4 and 1x1".into()));
    }
    params.validate()?;
    limits.validate()?;
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut state = match config.initial_state {
        Some(s) => s,
        None if config.initial_psi_range > 0.0 => {
            PlantState::with_angle(rng.gen_range(-config.initial_psi_range..=config.initial_psi_range))
        }
        None => PlantState::default(),
    };

    let f: [f64; N_STATES] = [gain.f[(0, 0)], gain.f[(0, 1)], gain.f[(0, 2)], gain.f[(0, 3)]];
    let steps = config.steps();
    let burn_in = config.burn_in_steps();
    let mut rows = Vec::with_capacity(steps);
    let mut total = 0.0;

    for k in 0..steps {
        let mut measured = state.physical();
        let e_psi: f64 = rng.sample(StandardNormal);
        let e_psi_dot: f64 = rng.sample(StandardNormal);
        measured[0] += config.noise.psi_std * e_psi;
        measured[1] += config.noise.psi_dot_std * e_psi_dot;

        let mut u = gain.fz * state.z;
        for j in 0..N_STATES {
            u += f[j] * measured[j];
        }
        let t = k as f64 * config.dt;

        if !state.is_finite() || !u.is_finite() {
            rows.push(TrajectoryRow { k, t, state, u });
            let mut eval = CostEvaluation::unstable(config.j_unstable, k, Some(k));
            eval.violation = Some(SafetyViolation::Angle);
            return Ok(Episode { evaluation: eval, trajectory: Trajectory { rows } });
        }
        if let Some(violation) = check_safety(&state, u, limits) {
            rows.push(TrajectoryRow { k, t, state, u });
            let mut eval = CostEvaluation::unstable(config.j_unstable, k, Some(k));
            eval.violation = Some(violation);
            return Ok(Episode { evaluation: eval, trajectory: Trajectory { rows } });
        }
        let u = u.clamp(-limits.u_max, limits.u_max);
        rows.push(TrajectoryRow { k, t, state, u });
        if k >= burn_in {
            total += stage_cost(&state.physical(), u, perf);
        }
        state = rk4_step(&state, u, params, config.dt);
    }

    let window = steps.saturating_sub(burn_in);
    let j_hat = if window > 0 { total / window as f64 } else { 0.0 };
    Ok(Episode {
        evaluation: CostEvaluation { j_hat, stable: true, steps_run: steps, failure_step: None, violation: None },
        trajectory: Trajectory { rows },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn perf() -> WeightPair {
        WeightPair::diagonal(&[1.0, 100.0, 10.0, 200.0], &[10.0]).unwrap()
    }

    #[test]
    fn upright_equilibrium() {
        let d = pole_derivatives(&PlantState::default(), 0.0, &PoleParams::short_pole());
        assert_eq!(d, PlantState::default());
    }

    #[test]
    fn derivative_at_horizontal() {
        let p = PoleParams::short_pole();
        let d = pole_derivatives(&PlantState::with_angle(std::f64::consts::FRAC_PI_2), 0.0, &p);
        assert_relative_eq!(d.psi_dot, 9.81 / 0.33, epsilon = 1e-12);
        assert_relative_eq!(d.psi_dot, 29.727272727, epsilon = 1e-8);
    }

    #[test]
    fn derivative_from_input() {
        let d = pole_derivatives(&PlantState::default(), 1.0, &PoleParams::short_pole());
        assert_relative_eq!(d.psi_dot, -1.0 / 0.33, epsilon = 1e-12);
        assert_eq!(d.s_dot, 1.0);
    }

    #[test]
    fn integrator_tracks_position() {
        let s = PlantState { s: 0.2, ..PlantState::default() };
        assert_eq!(pole_derivatives(&s, 0.0, &PoleParams::short_pole()).z, 0.2);
    }

    #[test]
    fn discretization_first_order_terms() {
        let p = PoleParams::short_pole();
        let dt = 1e-3;
        let model = linearize_and_discretize(&p, dt).unwrap();
        let (a, b) = continuous_linearization(&p);
        // ZOH agrees with Euler to O(dt^2).
        let euler_a = DMatrix::<f64>::identity(4, 4) + &a * dt;
        let euler_b = &b * dt;
        assert!((model.a() - euler_a).abs().max() < 10.0 * dt * dt * 30.0);
        assert!((model.b() - euler_b).abs().max() < 10.0 * dt * dt * 30.0);
        assert_relative_eq!(model.a()[(1, 0)], 9.81 / 0.33 * dt, max_relative = 1e-3);
    }

    #[test]
    fn discretization_vanishes_with_step() {
        let model = linearize_and_discretize(&PoleParams::long_pole(), 1e-12).unwrap();
        assert!((model.a() - DMatrix::<f64>::identity(4, 4)).abs().max() < 1e-8);
        assert!(model.b().abs().max() < 1e-8);
    }

    #[test]
    fn series_exponential_matches_pade() {
        let (a, _) = continuous_linearization(&PoleParams::short_pole());
        for t in [1e-3, 0.1, 1.0] {
            let ours = expm(&(&a * t));
            let reference = (&a * t).exp();
            assert!((&ours - &reference).norm() <= 1e-12 * reference.norm());
        }
    }

    #[test]
    fn continuous_eigenvalues_include_gravity_pair() {
        let p = PoleParams { xi: 0.0, ..PoleParams::short_pole() };
        let (a, _) = continuous_linearization(&p);
        let eig = a.complex_eigenvalues();
        let root = (9.81f64 / 0.33).sqrt();
        assert_relative_eq!(root, 5.452, epsilon = 1e-3);
        for target in [root, -root] {
            assert!(eig.iter().any(|z| (z.re - target).abs() < 1e-9 && z.im.abs() < 1e-9));
        }
    }

    #[test]
    fn safety_bounds_are_inclusive() {
        let lim = SafetyLimits::default();
        assert_eq!(check_safety(&PlantState::default(), 0.0, &lim), None);
        let s = PlantState { s: lim.s_max * 1.01, ..PlantState::default() };
        assert_eq!(check_safety(&s, 0.0, &lim), Some(SafetyViolation::Position));
        assert_eq!(check_safety(&PlantState::default(), lim.u_max, &lim), None);
        assert_eq!(check_safety(&PlantState::default(), -lim.u_max * 1.001, &lim), Some(SafetyViolation::Input));
        assert_eq!(check_safety(&PlantState::with_angle(0.4), 0.0, &lim), Some(SafetyViolation::Angle));
    }

    #[test]
    fn resting_plant_costs_nothing() {
        let cfg = EpisodeConfig {
            horizon_s: 5.0,
            burn_in_s: 1.0,
            initial_state: Some(PlantState::default()),
            noise: NoiseConfig::none(),
            ..EpisodeConfig::default()
        };
        let gain = ControllerGain::new(DMatrix::from_row_slice(1, 4, &[40.0, 7.6, 1.0, 5.0]), 0.3).unwrap();
        let ep = run_episode(&gain, &PoleParams::short_pole(), &cfg, &perf(), &SafetyLimits::default(), 3).unwrap();
        assert!(ep.evaluation.stable);
        assert_eq!(ep.evaluation.j_hat, 0.0);
    }

    #[test]
    fn open_loop_falls_over() {
        let cfg = EpisodeConfig {
            horizon_s: 10.0,
            burn_in_s: 1.0,
            initial_state: Some(PlantState::with_angle(0.01)),
            noise: NoiseConfig::none(),
            ..EpisodeConfig::default()
        };
        let ep = run_episode(
            &ControllerGain::zero(1, 4),
            &PoleParams::short_pole(),
            &cfg,
            &perf(),
            &SafetyLimits::default(),
            0,
        )
        .unwrap();
        let eval = &ep.evaluation;
        assert!(!eval.stable);
        assert_eq!(eval.j_hat, cfg.j_unstable);
        assert_eq!(eval.violation, Some(SafetyViolation::Angle));
        let k = eval.failure_step.unwrap();
        assert_eq!(ep.trajectory.rows.last().unwrap().k, k);
        // exp(sqrt(g/r) t) growth from 0.01 to 0.35 rad takes well under a second.
        assert!(k < 1500, "failed at step {k}");
    }

    #[test]
    fn burn_in_must_leave_a_window() {
        let cfg = EpisodeConfig { horizon_s: 1.0, burn_in_s: 1.0, ..EpisodeConfig::default() };
        assert!(cfg.validate().is_err());
        let zero = EpisodeConfig { horizon_s: 0.0, ..EpisodeConfig::default() };
        assert!(zero.validate().is_ok());
    }

    #[test]
    fn rejects_wrong_gain_shape() {
        let g = ControllerGain::zero(1, 3);
        let r = run_episode(&g, &PoleParams::short_pole(), &EpisodeConfig::default(), &perf(), &SafetyLimits::default(), 0);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn csv_keeps_final_row() {
        let rows = (0..5)
            .map(|k| TrajectoryRow { k, t: k as f64 * 0.5, state: PlantState::default(), u: 0.0 })
            .collect();
        let mut buf = Vec::new();
        Trajectory { rows }.write_csv(&mut buf, 3).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let ks: Vec<_> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
        assert_eq!(text.lines().next().unwrap(), TRAJECTORY_HEADER);
        assert_eq!(ks, ["0", "3", "4"]);
    }
}
