//! Model-based benchmark: steady-state Kalman predictor plus condensed MPC
//! with the true plant matrices.

use nalgebra::{DMatrix, DVector};

use crate::controllers::{AffineTracking, BoxConstraints, ControlWeights};
use crate::error::{Error, Result};
use crate::lti::{input_toeplitz, SystemModel};

/// One-step-ahead state prediction `x̂(t | t−1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub x_hat: DVector<f64>,
}

impl KalmanState {
    pub fn new(x_hat: DVector<f64>) -> Self {
        Self { x_hat }
    }

    pub fn zeros(sys: &SystemModel) -> Self {
        Self::new(DVector::zeros(sys.order()))
    }
}

/// `x̂⁺ = A x̂ + B u + K (y − C x̂ − D u)`.
pub fn kalman_step(sys: &SystemModel, ks: &KalmanState, u: &DVector<f64>, y: &DVector<f64>) -> Result<KalmanState> {
    if u.len() != sys.n_inputs() || y.len() != sys.n_outputs() || ks.x_hat.len() != sys.order() {
        return Err(Error::input("Kalman update dimensions do not match the system"));
    }
    let innov = y - &sys.c * &ks.x_hat - &sys.d * u;
    Ok(KalmanState::new(&sys.a * &ks.x_hat + &sys.b * u + &sys.k * innov))
}

/// Optimal open-loop plan over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcPlan {
    pub u_f: DVector<f64>,
    pub y_hat: DVector<f64>,
    pub objective: f64,
}

/// Condensed MPC: `ŷ = Γ x_init + H_d u_f` with the noise-free model.
pub fn solve_mpc(
    sys: &SystemModel,
    x_init: &DVector<f64>,
    y_r: &DVector<f64>,
    w: &ControlWeights,
    cons: &BoxConstraints,
    horizon: usize,
) -> Result<MpcPlan> {
    if horizon == 0 {
        return Err(Error::input("horizon must be positive"));
    }
    if x_init.len() != sys.order() {
        return Err(Error::input("x_init has the wrong length"));
    }
    let mt = sys.n_inputs() * horizon;
    let gamma = sys.observability_matrix(horizon);
    let hd = input_toeplitz(sys, horizon);
    let prob = AffineTracking::new(
        DVector::zeros(mt),
        DMatrix::identity(mt, mt),
        &gamma * x_init,
        hd.clone(),
        y_r,
        w,
        cons,
        horizon,
    )?;
    let mask = vec![false; mt];
    let (u_f, _) = prob.solve(0.0, &mask, None)?;
    let objective = prob.objective(&u_f, 0.0, &mask);
    let y_hat = gamma * x_init + hd * &u_f;
    Ok(MpcPlan { u_f, y_hat, objective })
}

/// State at the end of a noise-free window: least-squares initial state from
/// `y = O x0 + H_d u`, then propagated through the window. Requires
/// `rho >= n` for uniqueness.
pub fn state_from_window(sys: &SystemModel, u_past: &DMatrix<f64>, y_past: &DMatrix<f64>) -> Result<DVector<f64>> {
    let rho = u_past.ncols();
    if y_past.ncols() != rho || u_past.nrows() != sys.n_inputs() || y_past.nrows() != sys.n_outputs() {
        return Err(Error::input("window dimensions do not match the system"));
    }
    let n = sys.order();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let obs = sys.observability_matrix(rho);
    let hd = input_toeplitz(sys, rho);
    let u = DVector::from_column_slice(u_past.as_slice());
    let y = DVector::from_column_slice(y_past.as_slice());
    let rhs = y - hd * &u;
    let x0 = obs
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::input(e.to_string()))?;
    let mut x = x0;
    for t in 0..rho {
        x = &sys.a * x + &sys.b * u_past.column(t);
    }
    Ok(x)
}

/// Steady-state one-step predictor gain from process/measurement noise
/// covariances by iterating the Riccati recursion
///
/// ```text
/// P = A P A' + W − A P C' (C P C' + V)^{-1} C P A'
/// ```
///
/// Returns `(K, S)` with `K = A P C' S^{-1}` and innovation covariance
/// `S = C P C' + V`.
pub fn steady_state_gain(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, p) = (a.nrows(), c.nrows());
    if w.shape() != (n, n) || v.shape() != (p, p) {
        return Err(Error::config(format!("noise covariances must be {n}x{n} and {p}x{p}")));
    }
    let mut pm = w.clone();
    for _ in 0..100_000 {
        let s = c * &pm * c.transpose() + v;
        let s_inv = s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::config("measurement covariance is singular"))?;
        let apc = a * &pm * c.transpose();
        let mut next = a * &pm * a.transpose() + w - &apc * &s_inv * apc.transpose();
        next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &pm).amax();
        pm = next;
        if delta <= 1e-13 * pm.amax().max(1.0) {
            let s = c * &pm * c.transpose() + v;
            let k = a * &pm * c.transpose() * s.clone().try_inverse().expect("checked above");
            return Ok((k, s));
        }
    }
    Err(Error::config("Riccati recursion did not converge"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SystemConfig;
    use crate::lti::{benchmark_system, simulate};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn plant() -> SystemModel {
        benchmark_system(&SystemConfig::flexible_transmission()).unwrap()
    }

    #[test]
    fn zero_innovation_is_model_step() {
        let sys = SystemModel::new(
            scalar(0.5),
            scalar(2.0),
            scalar(1.0),
            scalar(0.1),
            scalar(0.4),
            scalar(1.0),
        )
        .unwrap();
        let ks = KalmanState::new(DVector::from_element(1, 3.0));
        let u = DVector::from_element(1, 1.0);
        let y = DVector::from_element(1, 3.0 + 0.1);
        assert!((kalman_step(&sys, &ks, &u, &y).unwrap().x_hat[0] - 3.5).abs() < 1e-15);
    }

    #[test]
    fn zero_gain_is_open_loop_observer() {
        let sys = SystemModel::deterministic(scalar(0.5), scalar(2.0), scalar(1.0), scalar(0.0)).unwrap();
        let ks = KalmanState::new(DVector::from_element(1, 1.0));
        let next = kalman_step(
            &sys,
            &ks,
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 100.0),
        )
        .unwrap();
        assert_eq!(next.x_hat[0], 2.5);
    }

    #[test]
    fn filter_tracks_noise_free_state() {
        let sys = plant();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let len = 60;
        let u = DMatrix::from_fn(1, len, |_, _| rng.random_range(-1.0..1.0));
        let x0 = DVector::from_vec(vec![0.3, -0.1, 0.2, 0.05]);
        let (y, xs) = simulate(&sys, &u, &DMatrix::zeros(1, len), &x0).unwrap();
        let mut ks = KalmanState::new(x0);
        for t in 0..len {
            assert!((&ks.x_hat - xs.column(t)).amax() < 1e-10);
            ks = kalman_step(&sys, &ks, &u.column(t).into_owned(), &y.column(t).into_owned()).unwrap();
        }
    }

    #[test]
    fn origin_is_optimal_at_rest() {
        let sys = plant();
        let w = ControlWeights::scaled_identity(2000.0, 0.01, 1, 1).unwrap();
        let plan = solve_mpc(
            &sys,
            &DVector::zeros(4),
            &DVector::zeros(20),
            &w,
            &BoxConstraints::default(),
            20,
        )
        .unwrap();
        assert!(plan.u_f.amax() < 1e-12);
    }

    #[test]
    fn scalar_feedthrough_closed_form() {
        let sys = SystemModel::deterministic(
            DMatrix::zeros(0, 0),
            DMatrix::zeros(0, 1),
            DMatrix::zeros(1, 0),
            scalar(1.0),
        )
        .unwrap();
        // ½(2000(u − 1)² + 0.01 u²) has its minimum at u = 2000/2000.01
        let w = ControlWeights::scaled_identity(2000.0, 0.01, 1, 1).unwrap();
        let plan = solve_mpc(
            &sys,
            &DVector::zeros(0),
            &DVector::from_element(1, 1.0),
            &w,
            &BoxConstraints::default(),
            1,
        )
        .unwrap();
        assert!((plan.u_f[0] - 2000.0 / 2000.01).abs() < 1e-12);
    }

    #[test]
    fn prediction_matrices_match_simulation() {
        let sys = plant();
        let horizon = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let u = DMatrix::from_fn(1, horizon, |_, _| rng.random_range(-1.0..1.0));
        let (y, _) = simulate(&sys, &u, &DMatrix::zeros(1, horizon), &x0).unwrap();
        let pred = sys.observability_matrix(horizon) * &x0
            + input_toeplitz(&sys, horizon) * DVector::from_column_slice(u.as_slice());
        assert!((pred - DVector::from_column_slice(y.as_slice())).amax() < 1e-10);
    }

    #[test]
    fn window_reconstructs_state() {
        let sys = plant();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let len = 10;
        let u = DMatrix::from_fn(1, len, |_, _| rng.random_range(-1.0..1.0));
        let x0 = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let (y, xs) = simulate(&sys, &u, &DMatrix::zeros(1, len), &x0).unwrap();
        let x = state_from_window(&sys, &u.columns(0, 6).into_owned(), &y.columns(0, 6).into_owned()).unwrap();
        assert!((x - xs.column(6)).amax() < 1e-8);
    }

    #[test]
    fn scalar_riccati_matches_quadratic_root() {
        let (a, w, v) = (0.9, 1.0, 1.0);
        let (k, s) = steady_state_gain(&scalar(a), &scalar(1.0), &scalar(w), &scalar(v)).unwrap();
        let b = v - a * a * v - w;
        let p = (-b + (b * b + 4.0 * w * v).sqrt()) / 2.0;
        assert!((s[(0, 0)] - (p + v)).abs() < 1e-10);
        assert!((k[(0, 0)] - a * p / (p + v)).abs() < 1e-10);
    }
}
