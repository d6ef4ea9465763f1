//! Analytic discrete-time dynamics.
//!
//! Continuous models are integrated with a fixed-step RK4 scheme; the
//! resulting one-step map is what every other module sees as `f(x, u)`.

mod arm;
mod cartpole;
mod linear;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use arm::{PlanarArm, PlanarArmParams};
pub use cartpole::{CartPole, CartPoleParams};
pub use linear::LinearModel;

pub type StateVector = DVector<f64>;
pub type ControlVector = DVector<f64>;

/// Default central-difference step for dynamics Jacobians.
pub const FD_STEP: f64 = 1e-5;

/// One-step discrete dynamics `x' = f(x, u)`.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    fn step(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector>;

    /// `(f_x, f_u)` of the one-step map. Central differences unless a model
    /// overrides it.
    fn jacobians(&self, x: &StateVector, u: &ControlVector) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        finite_difference_jacobians(self, x, u, FD_STEP)
    }

    /// Total mechanical energy (or a model-specific quadratic surrogate).
    fn energy(&self, x: &StateVector) -> f64;
}

/// Central-difference Jacobians of `model.step` with step `h`.
pub fn finite_difference_jacobians<D: Dynamics + ?Sized>(
    model: &D,
    x: &StateVector,
    u: &ControlVector,
    h: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let nx = model.state_dim();
    let nu = model.control_dim();
    let mut fx = DMatrix::zeros(nx, nx);
    let mut fu = DMatrix::zeros(nx, nu);
    let mut xp = x.clone();
    for j in 0..nx {
        xp[j] = x[j] + h;
        let plus = model.step(&xp, u)?;
        xp[j] = x[j] - h;
        let minus = model.step(&xp, u)?;
        xp[j] = x[j];
        fx.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    let mut up = u.clone();
    for j in 0..nu {
        up[j] = u[j] + h;
        let plus = model.step(x, &up)?;
        up[j] = u[j] - h;
        let minus = model.step(x, &up)?;
        up[j] = u[j];
        fu.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    Ok((fx, fu))
}

/// Classic fourth-order Runge-Kutta step of `xdot = deriv(x, u)` with the
/// control held constant over `dt`.
pub fn rk4_step<F>(deriv: F, x: &StateVector, u: &ControlVector, dt: f64) -> Result<StateVector>
where
    F: Fn(&StateVector, &ControlVector) -> Result<StateVector>,
{
    let k1 = deriv(x, u)?;
    let k2 = deriv(&(x + &k1 * (0.5 * dt)), u)?;
    let k3 = deriv(&(x + &k2 * (0.5 * dt)), u)?;
    let k4 = deriv(&(x + &k3 * dt), u)?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::IntegrationOverflow(format!(
            "non-finite state after step from {:?}",
            x.as_slice()
        )))
    }
}

pub(crate) fn check_inputs(x: &StateVector, u: &ControlVector, nx: usize, nu: usize) -> Result<()> {
    if x.len() != nx || u.len() != nu {
        return Err(Error::Contract(format!(
            "expected state/control dims ({nx}, {nu}), got ({}, {})",
            x.len(),
            u.len()
        )));
    }
    if !x.iter().chain(u.iter()).all(|v| v.is_finite()) {
        return Err(Error::Contract("non-finite state or control".into()));
    }
    Ok(())
}

/// A task-level system: dynamics plus the mapping from goal parameters to a
/// goal state.
#[derive(Debug, Clone, PartialEq)]
pub enum System {
    CartPole(CartPole),
    PlanarArm(PlanarArm),
}

impl System {
    pub fn dynamics(&self) -> &dyn Dynamics {
        match self {
            System::CartPole(m) => m,
            System::PlanarArm(m) => m,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            System::CartPole(_) => "cart_pole",
            System::PlanarArm(_) => "planar_arm",
        }
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics().state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics().control_dim()
    }

    /// Cart-pole: target cart position. Arm: target joint angles.
    pub fn goal_dim(&self) -> usize {
        match self {
            System::CartPole(_) => 1,
            System::PlanarArm(m) => m.params().n_links,
        }
    }

    pub fn goal_state(&self, goal: &[f64]) -> Result<StateVector> {
        if goal.len() != self.goal_dim() {
            return Err(Error::Contract(format!(
                "goal has {} entries, expected {}",
                goal.len(),
                self.goal_dim()
            )));
        }
        let mut x = StateVector::zeros(self.state_dim());
        match self {
            System::CartPole(_) => x[0] = goal[0],
            System::PlanarArm(_) => x.rows_mut(0, goal.len()).copy_from_slice(goal),
        }
        Ok(x)
    }

    pub fn mass_scaled(&self, delta_mass: f64) -> Result<System> {
        Ok(match self {
            System::CartPole(m) => System::CartPole(CartPole::new(m.params().mass_scaled(delta_mass)?)?),
            System::PlanarArm(m) => System::PlanarArm(PlanarArm::new(m.params().mass_scaled(delta_mass)?)?),
        })
    }
}
