use nalgebra::DMatrix;

use super::Trajectory;
use crate::envs::{ControlVector, StateVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LqrSolution {
    pub trajectory: Trajectory,
    /// `u_t = K_t x_t`.
    pub gains: Vec<DMatrix<f64>>,
    /// `P_0 .. P_T`; the optimal cost from `x_t` is `x_t^T P_t x_t`.
    pub cost_to_go: Vec<DMatrix<f64>>,
}

/// Exact finite-horizon discrete Riccati recursion for
/// `sum_t (x^T Q x + u^T R u) + x_T^T Q_f x_T` under `x' = A x + B u`.
pub fn riccati_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q_final: &DMatrix<f64>,
    horizon: usize,
    x0: &StateVector,
) -> Result<LqrSolution> {
    if r.clone().cholesky().is_none() {
        return Err(Error::Contract("R must be positive definite".into()));
    }
    let mut p = q_final.clone();
    let mut gains = vec![DMatrix::zeros(0, 0); horizon];
    let mut cost_to_go = vec![DMatrix::zeros(0, 0); horizon + 1];
    cost_to_go[horizon] = p.clone();
    let at = a.transpose();
    let bt = b.transpose();
    for t in (0..horizon).rev() {
        let s = r + &bt * &p * b;
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::Contract(format!("R + B^T P B singular at step {t}")))?;
        let k = -chol.solve(&(&bt * &p * a));
        let closed = a + b * &k;
        let next = q + &at * &p * &closed;
        p = (&next + next.transpose()) * 0.5;
        cost_to_go[t] = p.clone();
        gains[t] = k;
    }
    let mut states = vec![x0.clone()];
    let mut controls: Vec<ControlVector> = Vec::with_capacity(horizon);
    for k in &gains {
        let x = states.last().unwrap();
        let u = k * x;
        states.push(a * x + b * &u);
        controls.push(u);
    }
    Ok(LqrSolution {
        trajectory: Trajectory { states, controls },
        gains,
        cost_to_go,
    })
}
