use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{check_inputs, rk4_step, ControlVector, Dynamics, StateVector};
use crate::error::{Error, Result};

/// Frictionless cart with a point-mass pole on a massless rod.
///
/// State is `(p, v, theta, omega)` with `theta = 0` upright and
/// `theta = pi` hanging down; the single control is the horizontal force on
/// the cart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    pub gravity: f64,
    pub dt: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_length: 0.5,
            gravity: 9.81,
            dt: 0.01,
        }
    }
}

impl CartPoleParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cart_mass, self.pole_mass, self.pole_length, self.dt];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) || !self.gravity.is_finite() {
            return Err(Error::Parameter(format!(
                "cart-pole masses, length and dt must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Both the cart and pole mass reduced by `delta_mass`.
    pub fn mass_scaled(&self, delta_mass: f64) -> Result<Self> {
        let out = Self {
            cart_mass: self.cart_mass - delta_mass,
            pole_mass: self.pole_mass - delta_mass,
            ..self.clone()
        };
        if out.cart_mass <= 0.0 || out.pole_mass <= 0.0 {
            return Err(Error::Parameter(format!(
                "mass reduction {delta_mass} leaves a non-positive mass"
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CartPole {
    params: CartPoleParams,
}

impl CartPole {
    pub fn new(params: CartPoleParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &CartPoleParams {
        &self.params
    }

    /// Closed-form accelerations:
    ///
    /// ```text
    /// pdd     = (F + m sin(th) (l w^2 - g cos(th))) / (M + m sin^2(th))
    /// thdd    = (g sin(th) - cos(th) pdd) / l
    /// ```
    pub fn accelerations(&self, theta: f64, omega: f64, force: f64) -> (f64, f64) {
        let CartPoleParams {
            cart_mass,
            pole_mass,
            pole_length,
            gravity,
            ..
        } = self.params;
        let (s, c) = theta.sin_cos();
        let pdd = (force + pole_mass * s * (pole_length * omega * omega - gravity * c))
            / (cart_mass + pole_mass * s * s);
        let thdd = (gravity * s - c * pdd) / pole_length;
        (pdd, thdd)
    }

    pub fn derivative(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
        let (pdd, thdd) = self.accelerations(x[2], x[3], u[0]);
        Ok(StateVector::from_vec(vec![x[1], pdd, x[3], thdd]))
    }
}

impl Dynamics for CartPole {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn step(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
        check_inputs(x, u, 4, 1)?;
        rk4_step(|x, u| self.derivative(x, u), x, u, self.params.dt)
    }

    fn jacobians(&self, x: &StateVector, u: &ControlVector) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        super::finite_difference_jacobians(self, x, u, super::FD_STEP)
    }

    /// Kinetic plus potential energy, with the potential zeroed at the
    /// hanging-down configuration so the total is non-negative.
    fn energy(&self, x: &StateVector) -> f64 {
        let CartPoleParams {
            cart_mass: m_c,
            pole_mass: m_p,
            pole_length: l,
            gravity: g,
            ..
        } = self.params;
        let (v, th, w) = (x[1], x[2], x[3]);
        let kinetic = 0.5 * (m_c + m_p) * v * v + m_p * l * v * w * th.cos() + 0.5 * m_p * l * l * w * w;
        let potential = m_p * g * l * (1.0 + th.cos());
        kinetic + potential
    }
}
