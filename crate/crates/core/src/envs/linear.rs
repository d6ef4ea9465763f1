use nalgebra::DMatrix;

use super::{check_inputs, ControlVector, Dynamics, StateVector};
use crate::error::{Error, Result};

/// Discrete linear system `x' = A x + B u`. Used for LQR checks and the
/// value-discrepancy diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() {
            return Err(Error::Contract(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }
}

impl Dynamics for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
        check_inputs(x, u, self.state_dim(), self.control_dim())?;
        Ok(&self.a * x + &self.b * u)
    }

    fn jacobians(&self, _x: &StateVector, _u: &ControlVector) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }

    /// `|x|^2 / 2`; linear models carry no physical energy.
    fn energy(&self, x: &StateVector) -> f64 {
        0.5 * x.norm_squared()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::finite_difference_jacobians;

    #[test]
    fn fd_jacobians_recover_a_and_b() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.3, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.5]);
        let m = LinearModel::new(a.clone(), b.clone()).unwrap();
        let x = StateVector::from_column_slice(&[0.3, -2.0]);
        let u = ControlVector::from_column_slice(&[1.1]);
        let (fx, fu) = finite_difference_jacobians(&m, &x, &u, 1e-5).unwrap();
        assert!((fx - a).amax() < 1e-9);
        assert!((fu - b).amax() < 1e-9);
    }

    #[test]
    fn rejects_shape_mismatch() {
        assert!(LinearModel::new(DMatrix::zeros(2, 2), DMatrix::zeros(3, 1)).is_err());
    }
}
