//! Iterative LQR flavour of differential dynamic programming.
//!
//! The backward pass uses first-order dynamics derivatives (Gauss-Newton
//! approximation of the Q-function Hessians). Regularization is added to
//! `Q_uu` only, with x10 escalation on failure and x2 decay on success.

mod lqr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::costs::{AdmmResidual, QuadraticCost};
use crate::envs::{ControlVector, Dynamics, StateVector};
use crate::error::{Error, Result};

pub use lqr::{riccati_lqr, LqrSolution};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `T + 1` states; `states[0]` is the initial condition.
    pub states: Vec<StateVector>,
    /// `T` controls.
    pub controls: Vec<ControlVector>,
}

impl Trajectory {
    pub fn rollout(model: &dyn Dynamics, x0: &StateVector, controls: &[ControlVector]) -> Result<Self> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0.clone());
        for u in controls {
            let next = model.step(states.last().unwrap(), u)?;
            states.push(next);
        }
        Ok(Self {
            states,
            controls: controls.to_vec(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn x0(&self) -> &StateVector {
        &self.states[0]
    }

    pub fn is_finite(&self) -> bool {
        self.states
            .iter()
            .chain(&self.controls)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.controls.len() + 1 {
            return Err(Error::Contract(format!(
                "trajectory has {} states for {} controls",
                self.states.len(),
                self.controls.len()
            )));
        }
        if !self.is_finite() {
            return Err(Error::Contract("trajectory contains non-finite values".into()));
        }
        Ok(())
    }

    /// Total cost including ADMM terms when given.
    pub fn cost(&self, cost: &QuadraticCost, residuals: Option<&[AdmmResidual]>) -> Result<f64> {
        let mut total = 0.0;
        for t in 0..self.horizon() {
            let ar = residuals.map(|r| &r[t]);
            total += cost.running(&self.states[t], &self.controls[t], ar)?.value;
        }
        Ok(total + cost.terminal(&self.states[self.horizon()])?.value)
    }
}

/// Feedforward `k` and feedback `K` per step: `du = k + K dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct DdpGains {
    pub feedforward: Vec<DVector<f64>>,
    pub feedback: Vec<DMatrix<f64>>,
}

/// Predicted cost change of a step with scale `alpha` is
/// `alpha * linear + alpha^2 / 2 * quadratic` (negative for descent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedDecrease {
    pub linear: f64,
    pub quadratic: f64,
}

impl ExpectedDecrease {
    pub fn at(&self, alpha: f64) -> f64 {
        -(alpha * self.linear + 0.5 * alpha * alpha * self.quadratic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpSettings {
    pub max_iters: usize,
    /// Relative cost-change tolerance: stop when `|dJ| < tol * (1 + |J|)`.
    pub cost_tolerance: f64,
    pub mu_init: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    /// Strictly decreasing step scales in (0, 1].
    pub line_search: Vec<f64>,
    /// Minimum ratio of actual to expected decrease.
    pub armijo: f64,
    /// Optional elementwise clamp applied during forward rollouts.
    pub control_limit: Option<f64>,
}

impl Default for DdpSettings {
    fn default() -> Self {
        Self {
            max_iters: 200,
            cost_tolerance: 1e-9,
            mu_init: 0.0,
            mu_min: 1e-6,
            mu_max: 1e10,
            line_search: (0..7).map(|i| 0.5f64.powi(i)).collect(),
            armijo: 1e-4,
            control_limit: None,
        }
    }
}

impl DdpSettings {
    pub fn validate(&self) -> Result<()> {
        let ok_schedule = !self.line_search.is_empty()
            && self.line_search.iter().all(|a| *a > 0.0 && *a <= 1.0)
            && self.line_search.windows(2).all(|w| w[1] < w[0]);
        if !ok_schedule {
            return Err(Error::Config("ddp.line_search must be strictly decreasing in (0, 1]".into()));
        }
        if self.cost_tolerance <= 0.0 || self.mu_min <= 0.0 || self.mu_max < self.mu_min || self.mu_init < 0.0 {
            return Err(Error::Config("ddp tolerances and regularization bounds must be positive".into()));
        }
        if self.control_limit.is_some_and(|l| l <= 0.0) {
            return Err(Error::Config("ddp.control_limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdpStatus {
    Converged,
    /// Hit `max_iters` while still making progress.
    IterationLimit,
    /// No step accepted even at `mu_max`.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct DdpSolution {
    pub trajectory: Trajectory,
    /// Cost of the initial rollout followed by every accepted iterate.
    pub cost_history: Vec<f64>,
    pub status: DdpStatus,
}

impl DdpSolution {
    pub fn cost(&self) -> f64 {
        *self.cost_history.last().unwrap()
    }

    pub fn converged(&self) -> bool {
        self.status == DdpStatus::Converged
    }
}

struct Linearization {
    fx: Vec<DMatrix<f64>>,
    fu: Vec<DMatrix<f64>>,
    l_x: Vec<DVector<f64>>,
    l_u: Vec<DVector<f64>>,
    l_xx: Vec<DMatrix<f64>>,
    l_uu: Vec<DMatrix<f64>>,
    l_ux: Vec<DMatrix<f64>>,
    vf_x: DVector<f64>,
    vf_xx: DMatrix<f64>,
}

fn linearize(
    traj: &Trajectory,
    model: &dyn Dynamics,
    cost: &QuadraticCost,
    residuals: Option<&[AdmmResidual]>,
) -> Result<Linearization> {
    let t_len = traj.horizon();
    let mut lin = Linearization {
        fx: Vec::with_capacity(t_len),
        fu: Vec::with_capacity(t_len),
        l_x: Vec::with_capacity(t_len),
        l_u: Vec::with_capacity(t_len),
        l_xx: Vec::with_capacity(t_len),
        l_uu: Vec::with_capacity(t_len),
        l_ux: Vec::with_capacity(t_len),
        vf_x: DVector::zeros(0),
        vf_xx: DMatrix::zeros(0, 0),
    };
    for t in 0..t_len {
        let (fx, fu) = model.jacobians(&traj.states[t], &traj.controls[t])?;
        let c = cost.running(&traj.states[t], &traj.controls[t], residuals.map(|r| &r[t]))?;
        lin.fx.push(fx);
        lin.fu.push(fu);
        lin.l_x.push(c.l_x);
        lin.l_u.push(c.l_u);
        lin.l_xx.push(c.l_xx);
        lin.l_uu.push(c.l_uu);
        lin.l_ux.push(c.l_ux);
    }
    let term = cost.terminal(&traj.states[t_len])?;
    lin.vf_x = term.l_x;
    lin.vf_xx = term.l_xx;
    Ok(lin)
}

fn backward_from(lin: &Linearization, mu: f64) -> Result<(DdpGains, ExpectedDecrease)> {
    let t_len = lin.fx.len();
    let mut v_x = lin.vf_x.clone();
    let mut v_xx = lin.vf_xx.clone();
    let mut feedforward = vec![DVector::zeros(0); t_len];
    let mut feedback = vec![DMatrix::zeros(0, 0); t_len];
    let mut dv = ExpectedDecrease {
        linear: 0.0,
        quadratic: 0.0,
    };
    for t in (0..t_len).rev() {
        let fx = &lin.fx[t];
        let fu = &lin.fu[t];
        let fx_t = fx.transpose();
        let fu_t = fu.transpose();
        let q_x = &lin.l_x[t] + &fx_t * &v_x;
        let q_u = &lin.l_u[t] + &fu_t * &v_x;
        let vxx_fx = &v_xx * fx;
        let vxx_fu = &v_xx * fu;
        let q_xx = &lin.l_xx[t] + &fx_t * &vxx_fx;
        let q_uu = &lin.l_uu[t] + &fu_t * &vxx_fu;
        let q_ux = &lin.l_ux[t] + &fu_t * &vxx_fx;

        let mut q_uu_reg = q_uu.clone();
        for i in 0..q_uu_reg.nrows() {
            q_uu_reg[(i, i)] += mu;
        }
        let chol = q_uu_reg.cholesky().ok_or(Error::NotPositiveDefinite(t))?;
        let k = -chol.solve(&q_u);
        let big_k = -chol.solve(&q_ux);

        dv.linear += k.dot(&q_u);
        dv.quadratic += k.dot(&(&q_uu * &k));

        let kt = big_k.transpose();
        v_x = &q_x + &kt * (&q_uu * &k) + &kt * &q_u + q_ux.transpose() * &k;
        let vxx = &q_xx + &kt * &q_uu * &big_k + &kt * &q_ux + q_ux.transpose() * &big_k;
        v_xx = (&vxx + vxx.transpose()) * 0.5;

        feedforward[t] = k;
        feedback[t] = big_k;
    }
    Ok((DdpGains { feedforward, feedback }, dv))
}

/// Backward Riccati-like sweep of the local Q-function expansion around
/// `traj`. Fails with [`Error::NotPositiveDefinite`] when `Q_uu + mu I` is
/// not positive definite; the caller is expected to raise `mu` and retry.
pub fn backward_pass(
    traj: &Trajectory,
    model: &dyn Dynamics,
    cost: &QuadraticCost,
    residuals: Option<&[AdmmResidual]>,
    mu: f64,
) -> Result<(DdpGains, ExpectedDecrease)> {
    traj.validate()?;
    check_residuals(traj.horizon(), residuals)?;
    let lin = linearize(traj, model, cost, residuals)?;
    backward_from(&lin, mu)
}

/// Rolls out `u_t = u_bar_t + alpha k_t + K_t (x_t - x_bar_t)`.
pub fn forward_pass(
    traj: &Trajectory,
    gains: &DdpGains,
    model: &dyn Dynamics,
    cost: &QuadraticCost,
    residuals: Option<&[AdmmResidual]>,
    alpha: f64,
    control_limit: Option<f64>,
) -> Result<(Trajectory, f64)> {
    let t_len = traj.horizon();
    if gains.feedforward.len() != t_len || gains.feedback.len() != t_len {
        return Err(Error::Contract("gains do not match trajectory horizon".into()));
    }
    let mut states = Vec::with_capacity(t_len + 1);
    let mut controls = Vec::with_capacity(t_len);
    states.push(traj.states[0].clone());
    let mut total = 0.0;
    for t in 0..t_len {
        let x = &states[t];
        let dx = x - &traj.states[t];
        let mut u = &traj.controls[t] + &gains.feedforward[t] * alpha + &gains.feedback[t] * dx;
        if let Some(limit) = control_limit {
            u.apply(|v| *v = v.clamp(-limit, limit));
        }
        total += cost.running(x, &u, residuals.map(|r| &r[t]))?.value;
        let next = model.step(x, &u)?;
        states.push(next);
        controls.push(u);
    }
    total += cost.terminal(&states[t_len])?.value;
    if !total.is_finite() {
        return Err(Error::IntegrationOverflow("forward pass produced a non-finite cost".into()));
    }
    Ok((Trajectory { states, controls }, total))
}

fn check_residuals(horizon: usize, residuals: Option<&[AdmmResidual]>) -> Result<()> {
    if let Some(r) = residuals {
        if r.len() != horizon {
            return Err(Error::Contract(format!(
                "{} ADMM residual terms for horizon {horizon}",
                r.len()
            )));
        }
    }
    Ok(())
}

fn raise_mu(mu: f64, settings: &DdpSettings) -> f64 {
    (mu * 10.0).max(settings.mu_min)
}

/// Solves the (optionally ADMM-augmented) trajectory optimization problem
/// from `x0`. Starts from `init_controls` or zeros.
pub fn solve_ddp(
    x0: &StateVector,
    model: &dyn Dynamics,
    cost: &QuadraticCost,
    residuals: Option<&[AdmmResidual]>,
    settings: &DdpSettings,
    horizon: usize,
    init_controls: Option<&[ControlVector]>,
) -> Result<DdpSolution> {
    check_residuals(horizon, residuals)?;
    let controls: Vec<ControlVector> = match init_controls {
        Some(u) if u.len() == horizon => u.to_vec(),
        Some(u) => {
            return Err(Error::Contract(format!(
                "{} initial controls for horizon {horizon}",
                u.len()
            )))
        }
        None => vec![ControlVector::zeros(model.control_dim()); horizon],
    };
    let mut traj = Trajectory::rollout(model, x0, &controls)?;
    let mut current = traj.cost(cost, residuals)?;
    let mut cost_history = vec![current];
    let mut mu = settings.mu_init;
    let mut status = DdpStatus::IterationLimit;

    'outer: for _ in 0..settings.max_iters {
        let lin = linearize(&traj, model, cost, residuals)?;
        let tol = settings.cost_tolerance * (1.0 + current.abs());
        loop {
            let (gains, dv) = match backward_from(&lin, mu) {
                Ok(bp) => bp,
                Err(Error::NotPositiveDefinite(_)) => {
                    mu = raise_mu(mu, settings);
                    if mu > settings.mu_max {
                        status = DdpStatus::Stalled;
                        break 'outer;
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            if -dv.linear < tol {
                status = DdpStatus::Converged;
                break 'outer;
            }
            let mut accepted = None;
            for &alpha in &settings.line_search {
                let Ok((candidate, new_cost)) =
                    forward_pass(&traj, &gains, model, cost, residuals, alpha, settings.control_limit)
                else {
                    continue;
                };
                let expected = dv.at(alpha);
                let actual = current - new_cost;
                if actual > 0.0 && actual > settings.armijo * expected {
                    accepted = Some((candidate, new_cost));
                    break;
                }
            }
            match accepted {
                Some((candidate, new_cost)) => {
                    let change = current - new_cost;
                    traj = candidate;
                    current = new_cost;
                    cost_history.push(current);
                    mu = if mu * 0.5 < settings.mu_min { 0.0 } else { mu * 0.5 };
                    if change < tol {
                        status = DdpStatus::Converged;
                        break 'outer;
                    }
                    continue 'outer;
                }
                None => {
                    mu = raise_mu(mu, settings);
                    if mu > settings.mu_max {
                        status = DdpStatus::Stalled;
                        break 'outer;
                    }
                }
            }
        }
    }
    Ok(DdpSolution {
        trajectory: traj,
        cost_history,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{CartPole, CartPoleParams, LinearModel};
    use std::f64::consts::PI;

    fn scalar_problem() -> (LinearModel, QuadraticCost) {
        let m = LinearModel::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        let c = QuadraticCost::diagonal(&[0.0], &[1.0], &[1.0], StateVector::zeros(1)).unwrap();
        (m, c)
    }

    #[test]
    fn one_step_scalar_feedforward() {
        // d/du (u^2 + (1 + u)^2) = 0  =>  u = -0.5
        let (m, c) = scalar_problem();
        let x0 = StateVector::from_element(1, 1.0);
        let traj = Trajectory::rollout(&m, &x0, &[ControlVector::zeros(1)]).unwrap();
        let (gains, _) = backward_pass(&traj, &m, &c, None, 0.0).unwrap();
        assert!((gains.feedforward[0][0] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn zero_step_is_identity() {
        let (m, c) = scalar_problem();
        let x0 = StateVector::from_element(1, 1.0);
        let traj = Trajectory::rollout(&m, &x0, &vec![ControlVector::from_element(1, 0.3); 5]).unwrap();
        let (gains, _) = backward_pass(&traj, &m, &c, None, 0.0).unwrap();
        let (same, cost) = forward_pass(&traj, &gains, &m, &c, None, 0.0, None).unwrap();
        assert_eq!(same, traj);
        assert_eq!(cost, traj.cost(&c, None).unwrap());
    }

    #[test]
    fn at_optimum_feedforward_vanishes() {
        let (m, c) = scalar_problem();
        let x0 = StateVector::from_element(1, 1.0);
        let sol = solve_ddp(&x0, &m, &c, None, &DdpSettings::default(), 10, None).unwrap();
        let (gains, _) = backward_pass(&sol.trajectory, &m, &c, None, 0.0).unwrap();
        assert!(gains.feedforward.iter().all(|k| k.norm() <= 1e-8));
    }

    #[test]
    fn goal_start_is_already_optimal() {
        let m = CartPole::new(CartPoleParams::default()).unwrap();
        let c = QuadraticCost::diagonal(&[1.0, 0.1, 10.0, 0.1], &[0.01], &[1.0, 0.1, 10.0, 0.1], StateVector::zeros(4))
            .unwrap();
        let sol = solve_ddp(&StateVector::zeros(4), &m, &c, None, &DdpSettings::default(), 50, None).unwrap();
        assert!(sol.cost() <= 1e-8);
        assert!(sol.trajectory.controls.iter().all(|u| u.amax() < 1e-8));
    }

    #[test]
    fn cart_pole_swing_up() {
        let m = CartPole::new(CartPoleParams::default()).unwrap();
        let c = QuadraticCost::diagonal(
            &[0.1, 0.01, 1.0, 0.01],
            &[0.01],
            &[100.0, 10.0, 1000.0, 10.0],
            StateVector::zeros(4),
        )
        .unwrap();
        let x0 = StateVector::from_column_slice(&[0.0, 0.0, PI, 0.0]);
        let sol = solve_ddp(&x0, &m, &c, None, &DdpSettings::default(), 200, None).unwrap();
        assert!(sol.converged());
        assert!(sol.cost_history.windows(2).all(|w| w[1] < w[0]));
        let last = sol.trajectory.states.last().unwrap();
        assert!(last[2].abs() < 0.05, "terminal angle {}", last[2]);
    }

    #[test]
    fn rejects_bad_settings() {
        let s = DdpSettings {
            line_search: vec![1.0, 1.0],
            ..Default::default()
        };
        assert!(s.validate().is_err());
        assert!(DdpSettings::default().validate().is_ok());
    }
}
