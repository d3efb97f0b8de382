//! Discrete-time infinite-horizon LQR synthesis.
//!
//! The controller convention throughout the crate is `u_k = F x_k` (the gain
//! carries the minus sign), optionally augmented with an integrator term
//! `Fz z_k`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative residual at which the Riccati fixed point is accepted.
pub const DARE_TOLERANCE: f64 = 1e-10;

/// Upper bound on Riccati map applications (doubling steps count as one each).
pub const DARE_MAX_ITERATIONS: usize = 100_000;

/// Discrete-time linear model `x_{k+1} = A x_k + B u_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    dt: f64,
}

impl NominalModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension(format!("A is {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B is {}x{} but A is {}x{}",
                b.nrows(),
                b.ncols(),
                a.nrows(),
                a.ncols()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("sampling time {dt} must be positive")));
        }
        Ok(Self { a, b, dt })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
}

/// A pair of symmetric positive-definite weights `(Wx, Wu)`.
///
/// Used both for the design weights handed to synthesis and for the fixed
/// performance weights `(Q, R)` that define the evaluated cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightPair {
    wx: DMatrix<f64>,
    wu: DMatrix<f64>,
}

impl WeightPair {
    pub fn new(wx: DMatrix<f64>, wu: DMatrix<f64>) -> Result<Self> {
        check_spd(&wx, "Wx")?;
        check_spd(&wu, "Wu")?;
        Ok(Self { wx, wu })
    }

    pub fn diagonal(wx: &[f64], wu: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(wx)),
            DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(wu)),
        )
    }

    pub fn wx(&self) -> &DMatrix<f64> {
        &self.wx
    }

    pub fn wu(&self) -> &DMatrix<f64> {
        &self.wu
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.wx * c, &self.wu * c)
    }
}

fn check_spd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::InvalidWeights(format!("{name} must be square and non-empty")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidWeights(format!("{name} has non-finite entries")));
    }
    let asym = (m - m.transpose()).norm();
    if asym > 1e-12 * m.norm() {
        return Err(Error::InvalidWeights(format!("{name} is not symmetric")));
    }
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::InvalidWeights(format!("{name} is not positive definite")));
    }
    Ok(())
}

/// State-feedback gain `u = F x + Fz z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerGain {
    pub f: DMatrix<f64>,
    pub fz: f64,
}

impl ControllerGain {
    pub fn new(f: DMatrix<f64>, fz: f64) -> Result<Self> {
        if f.iter().any(|v| !v.is_finite()) || !fz.is_finite() {
            return Err(Error::InvalidParameter("gain has non-finite entries".into()));
        }
        Ok(Self { f, fz })
    }

    /// Single-input gain from its row of entries.
    pub fn from_row(f: &[f64], fz: f64) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(1, f.len(), f), fz)
    }

    pub fn zero(n_u: usize, n_x: usize) -> Self {
        Self { f: DMatrix::zeros(n_u, n_x), fz: 0.0 }
    }

    pub fn with_integrator(mut self, fz: f64) -> Self {
        self.fz = fz;
        self
    }
}

fn check_dims(model: &NominalModel, weights: &WeightPair) -> Result<()> {
    if weights.wx.nrows() != model.n_x() || weights.wu.nrows() != model.n_u() {
        return Err(Error::Dimension(format!(
            "weights are {}x{} / {}x{} for a model with n_x={}, n_u={}",
            weights.wx.nrows(),
            weights.wx.ncols(),
            weights.wu.nrows(),
            weights.wu.ncols(),
            model.n_x(),
            model.n_u()
        )));
    }
    Ok(())
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p += t;
    *p *= 0.5;
}

/// One application of the Riccati map
/// `P -> Wx + A'PA - A'PB (Wu + B'PB)^-1 B'PA`.
pub fn riccati_step(model: &NominalModel, weights: &WeightPair, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, b) = (&model.a, &model.b);
    let pa = p * a;
    let pb = p * b;
    let s = &weights.wu + b.transpose() * &pb;
    let bpa = b.transpose() * &pa;
    let k = s.lu().solve(&bpa).ok_or(Error::IllConditioned)?;
    let mut next = &weights.wx + a.transpose() * &pa - (a.transpose() * &pb) * k;
    symmetrize(&mut next);
    Ok(next)
}

/// `||P - Ric(P)||_F / ||P||_F`.
pub fn dare_residual(model: &NominalModel, weights: &WeightPair, p: &DMatrix<f64>) -> Result<f64> {
    let next = riccati_step(model, weights, p)?;
    let scale = p.norm().max(f64::MIN_POSITIVE);
    Ok((p - next).norm() / scale)
}

/// Solve the discrete algebraic Riccati equation for the cost-to-go matrix.
///
/// The recursion starts at `P0 = Wx` and is accelerated by doubling: after
/// `k` doubling steps the iterate equals `2^k - 1` applications of the
/// Riccati map. Plain map applications then polish the result until the
/// relative residual drops below [`DARE_TOLERANCE`].
pub fn solve_dare(model: &NominalModel, weights: &WeightPair) -> Result<DMatrix<f64>> {
    check_dims(model, weights)?;
    let n = model.n_x();
    let eye = DMatrix::<f64>::identity(n, n);
    let wu_inv = weights.wu.clone().cholesky().ok_or(Error::IllConditioned)?.inverse();

    let mut ak = model.a.clone();
    let mut gk = &model.b * wu_inv * model.b.transpose();
    let mut hk = weights.wx.clone();
    let mut applied = 0usize;

    for _ in 0..64 {
        let w = (&eye + &gk * &hk).lu();
        let w_inv_a = w.solve(&ak).ok_or(Error::IllConditioned)?;
        let w_inv_g = w.solve(&gk).ok_or(Error::IllConditioned)?;
        let a_next = &ak * &w_inv_a;
        let mut g_next = &gk + &ak * w_inv_g * ak.transpose();
        let mut h_next = &hk + ak.transpose() * &hk * &w_inv_a;
        symmetrize(&mut g_next);
        symmetrize(&mut h_next);
        applied = applied.saturating_mul(2).saturating_add(1);

        if h_next.iter().any(|v| !v.is_finite()) {
            break;
        }
        let delta = (&h_next - &hk).norm() / h_next.norm().max(f64::MIN_POSITIVE);
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if delta <= f64::EPSILON || applied >= DARE_MAX_ITERATIONS {
            break;
        }
    }

    let mut p = hk;
    let mut residual = f64::INFINITY;
    let mut iterations = applied.min(DARE_MAX_ITERATIONS);
    while iterations <= DARE_MAX_ITERATIONS {
        if p.iter().any(|v| !v.is_finite()) {
            break;
        }
        let next = riccati_step(model, weights, &p)?;
        residual = (&p - &next).norm() / p.norm().max(f64::MIN_POSITIVE);
        if residual <= DARE_TOLERANCE {
            return Ok(p);
        }
        p = next;
        iterations += 1;
    }
    Err(Error::NonConvergence { iterations, residual })
}

/// `F = -(Wu + B'PB)^-1 B'PA` with `Fz = 0`.
pub fn lqr_gain(model: &NominalModel, weights: &WeightPair) -> Result<ControllerGain> {
    let p = solve_dare(model, weights)?;
    gain_from_cost_to_go(model, weights, &p)
}

pub fn gain_from_cost_to_go(
    model: &NominalModel,
    weights: &WeightPair,
    p: &DMatrix<f64>,
) -> Result<ControllerGain> {
    let (a, b) = (&model.a, &model.b);
    let s = &weights.wu + b.transpose() * p * b;
    let rhs = b.transpose() * p * a;
    let k = s.lu().solve(&rhs).ok_or(Error::IllConditioned)?;
    ControllerGain::new(-k, 0.0)
}

/// Largest eigenvalue modulus of `A + B F`.
pub fn closed_loop_spectral_radius(model: &NominalModel, gain: &ControllerGain) -> Result<f64> {
    if gain.f.nrows() != model.n_u() || gain.f.ncols() != model.n_x() {
        return Err(Error::Dimension(format!(
            "gain is {}x{}, expected {}x{}",
            gain.f.nrows(),
            gain.f.ncols(),
            model.n_u(),
            model.n_x()
        )));
    }
    let closed = &model.a + &model.b * &gain.f;
    if closed.nrows() == 1 {
        return Ok(closed[(0, 0)].abs());
    }
    let eig = closed
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::InvalidParameter("eigenvalue iteration failed".into()))?
        .complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(a: f64, b: f64) -> NominalModel {
        NominalModel::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b), 1.0).unwrap()
    }

    fn scalar_weights(q: f64, r: f64) -> WeightPair {
        WeightPair::diagonal(&[q], &[r]).unwrap()
    }

    /// Plain Riccati recursion from `P0 = Wx` until the step drops below 1e-12.
    fn value_iteration(model: &NominalModel, w: &WeightPair) -> DMatrix<f64> {
        let mut p = w.wx().clone();
        for _ in 0..1_000_000 {
            let next = riccati_step(model, w, &p).unwrap();
            if (&next - &p).norm() < 1e-12 {
                return next;
            }
            p = next;
        }
        panic!("value iteration did not settle");
    }

    #[test]
    fn golden_ratio_fixed_point() {
        let p = solve_dare(&scalar(1.0, 1.0), &scalar_weights(1.0, 1.0)).unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert_relative_eq!(p[(0, 0)], golden, epsilon = 1e-12);
        let oracle = value_iteration(&scalar(1.0, 1.0), &scalar_weights(1.0, 1.0));
        assert_relative_eq!(p[(0, 0)], oracle[(0, 0)], epsilon = 1e-12);
    }

    #[test]
    fn deadbeat_plant_returns_state_weight() {
        let p = solve_dare(&scalar(0.0, 1.0), &scalar_weights(1.0, 1.0)).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
    }

    #[test]
    fn half_plant_matches_value_iteration() {
        let model = scalar(0.5, 1.0);
        let w = scalar_weights(2.0, 1.0);
        let p = solve_dare(&model, &w).unwrap();
        let oracle = value_iteration(&model, &w);
        assert_relative_eq!(p[(0, 0)], oracle[(0, 0)], epsilon = 1e-11);
    }

    #[test]
    fn scalar_gain_and_radius() {
        let model = scalar(1.0, 1.0);
        let gain = lqr_gain(&model, &scalar_weights(1.0, 1.0)).unwrap();
        assert_relative_eq!(gain.f[(0, 0)], -(5f64.sqrt() - 1.0) / 2.0, epsilon = 1e-10);
        let rho = closed_loop_spectral_radius(&model, &gain).unwrap();
        assert_relative_eq!(rho, 1.0 - (5f64.sqrt() - 1.0) / 2.0, epsilon = 1e-10);
    }

    #[test]
    fn radius_without_feedback() {
        let g = ControllerGain::new(DMatrix::from_element(1, 1, 3.7), 0.0).unwrap();
        assert_eq!(closed_loop_spectral_radius(&scalar(0.5, 0.0), &g).unwrap(), 0.5);
        let zero = ControllerGain::zero(1, 1);
        assert_relative_eq!(closed_loop_spectral_radius(&scalar(1.1, 1.0), &zero).unwrap(), 1.1);
    }

    #[test]
    fn uncontrollable_unstable_mode_fails() {
        let model = scalar(1.5, 0.0);
        match solve_dare(&model, &scalar_weights(1.0, 1.0)) {
            Err(Error::NonConvergence { .. }) => {}
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn weights_must_be_spd() {
        assert!(WeightPair::diagonal(&[1.0, 0.0], &[1.0]).is_err());
        assert!(WeightPair::diagonal(&[1.0], &[-1.0]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(WeightPair::new(asym, DMatrix::identity(1, 1)).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let w = WeightPair::diagonal(&[1.0, 1.0], &[1.0]).unwrap();
        assert!(matches!(solve_dare(&scalar(1.0, 1.0), &w), Err(Error::Dimension(_))));
        assert!(NominalModel::new(DMatrix::identity(2, 2), DMatrix::zeros(3, 1), 0.1).is_err());
        assert!(NominalModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), 0.0).is_err());
    }
}
