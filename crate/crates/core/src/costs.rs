//! Quadratic tracking cost with the ADMM consensus penalty.

use nalgebra::{DMatrix, DVector};

use crate::envs::{ControlVector, StateVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_final: DMatrix<f64>,
    pub x_goal: StateVector,
}

/// Consensus penalty terms `(rho_x/2)|x - x_pl + lambda_x|^2 +
/// (rho_u/2)|u - u_pl + lambda_u|^2` for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmResidual {
    pub rho_x: f64,
    pub rho_u: f64,
    pub x_pl: StateVector,
    pub u_pl: ControlVector,
    pub lambda_x: StateVector,
    pub lambda_u: ControlVector,
}

impl AdmmResidual {
    /// All-zero terms. This is what the first ADMM iteration uses.
    pub fn zero(nx: usize, nu: usize) -> Self {
        Self {
            rho_x: 0.0,
            rho_u: 0.0,
            x_pl: StateVector::zeros(nx),
            u_pl: ControlVector::zeros(nu),
            lambda_x: StateVector::zeros(nx),
            lambda_u: ControlVector::zeros(nu),
        }
    }
}

/// Value and derivatives of the running cost. `l_ux` is identically zero for
/// this cost family but kept for the DDP interface.
#[derive(Debug, Clone)]
pub struct RunningCostEval {
    pub value: f64,
    pub l_x: DVector<f64>,
    pub l_u: DVector<f64>,
    pub l_xx: DMatrix<f64>,
    pub l_uu: DMatrix<f64>,
    pub l_ux: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct TerminalCostEval {
    pub value: f64,
    pub l_x: DVector<f64>,
    pub l_xx: DMatrix<f64>,
}

fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Contract(format!("{name} must be square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Contract(format!("{name} must be symmetric")));
    }
    let min_eig = m.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-12 * scale {
        return Err(Error::Contract(format!("{name} must be PSD (min eigenvalue {min_eig})")));
    }
    Ok(())
}

impl QuadraticCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, q_final: DMatrix<f64>, x_goal: StateVector) -> Result<Self> {
        check_psd("Q", &q)?;
        check_psd("R", &r)?;
        check_psd("Q_f", &q_final)?;
        let nx = x_goal.len();
        if q.nrows() != nx || q_final.nrows() != nx {
            return Err(Error::Contract("Q / Q_f do not match goal dimension".into()));
        }
        Ok(Self { q, r, q_final, x_goal })
    }

    /// Diagonal weights; the usual way configs specify costs.
    pub fn diagonal(q: &[f64], r: &[f64], q_final: &[f64], x_goal: StateVector) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(q)),
            DMatrix::from_diagonal(&DVector::from_column_slice(r)),
            DMatrix::from_diagonal(&DVector::from_column_slice(q_final)),
            x_goal,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.r.nrows()
    }

    fn check(&self, x: &StateVector, u: Option<&ControlVector>) -> Result<()> {
        if x.len() != self.state_dim() || u.is_some_and(|u| u.len() != self.control_dim()) {
            return Err(Error::Contract("cost evaluated with mismatched state/control shape".into()));
        }
        Ok(())
    }

    /// Tracking part only: `x^T Q x + u^T R u` with `x` relative to the goal.
    pub fn tracking(&self, x: &StateVector, u: &ControlVector) -> f64 {
        let xh = x - &self.x_goal;
        xh.dot(&(&self.q * &xh)) + u.dot(&(&self.r * u))
    }

    pub fn running(&self, x: &StateVector, u: &ControlVector, ar: Option<&AdmmResidual>) -> Result<RunningCostEval> {
        self.check(x, Some(u))?;
        let nx = self.state_dim();
        let nu = self.control_dim();
        let xh = x - &self.x_goal;
        let qx = &self.q * &xh;
        let ru = &self.r * u;
        let mut value = xh.dot(&qx) + u.dot(&ru);
        let mut l_x = qx * 2.0;
        let mut l_u = ru * 2.0;
        let mut l_xx = &self.q * 2.0;
        let mut l_uu = &self.r * 2.0;
        if let Some(ar) = ar {
            if ar.x_pl.len() != nx || ar.lambda_x.len() != nx || ar.u_pl.len() != nu || ar.lambda_u.len() != nu {
                return Err(Error::Contract("ADMM residual terms have mismatched shape".into()));
            }
            if ar.rho_x != 0.0 {
                let dx = x - &ar.x_pl + &ar.lambda_x;
                value += 0.5 * ar.rho_x * dx.norm_squared();
                l_x += dx * ar.rho_x;
                for i in 0..nx {
                    l_xx[(i, i)] += ar.rho_x;
                }
            }
            if ar.rho_u != 0.0 {
                let du = u - &ar.u_pl + &ar.lambda_u;
                value += 0.5 * ar.rho_u * du.norm_squared();
                l_u += du * ar.rho_u;
                for i in 0..nu {
                    l_uu[(i, i)] += ar.rho_u;
                }
            }
        }
        Ok(RunningCostEval {
            value,
            l_x,
            l_u,
            l_xx,
            l_uu,
            l_ux: DMatrix::zeros(nu, nx),
        })
    }

    pub fn terminal(&self, x: &StateVector) -> Result<TerminalCostEval> {
        self.check(x, None)?;
        let xh = x - &self.x_goal;
        let qx = &self.q_final * &xh;
        Ok(TerminalCostEval {
            value: xh.dot(&qx),
            l_x: qx * 2.0,
            l_xx: &self.q_final * 2.0,
        })
    }

    pub fn terminal_value(&self, x: &StateVector) -> f64 {
        let xh = x - &self.x_goal;
        xh.dot(&(&self.q_final * &xh))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cost(nx: usize, nu: usize) -> QuadraticCost {
        let q = DMatrix::from_fn(nx, nx, |i, j| if i == j { 1.0 + i as f64 } else { 0.1 });
        let r = DMatrix::from_fn(nu, nu, |i, j| if i == j { 0.5 } else { 0.05 });
        let qf = DMatrix::identity(nx, nx) * 3.0;
        QuadraticCost::new(q, r, qf, StateVector::from_fn(nx, |i, _| 0.2 * i as f64)).unwrap()
    }

    fn residual(nx: usize, nu: usize) -> AdmmResidual {
        AdmmResidual {
            rho_x: 10.0,
            rho_u: 1.0,
            x_pl: StateVector::from_fn(nx, |i, _| 0.3 - 0.1 * i as f64),
            u_pl: ControlVector::from_fn(nu, |i, _| -0.4 + i as f64),
            lambda_x: StateVector::from_fn(nx, |i, _| 0.05 * i as f64),
            lambda_u: ControlVector::from_element(nu, 0.2),
        }
    }

    #[test]
    fn zero_at_goal() {
        let c = cost(4, 1);
        let v = c.running(&c.x_goal.clone(), &ControlVector::zeros(1), None).unwrap();
        assert_eq!(v.value, 0.0);
        assert_eq!(c.terminal(&c.x_goal.clone()).unwrap().value, 0.0);
    }

    #[test]
    fn unit_quadratic() {
        let c = QuadraticCost::diagonal(&[1.0; 3], &[1.0], &[2.0; 3], StateVector::zeros(3)).unwrap();
        let e1 = StateVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let v = c.running(&e1, &ControlVector::zeros(1), Some(&AdmmResidual::zero(3, 1))).unwrap();
        assert_eq!(v.value, 1.0);
        assert_eq!(c.terminal(&e1).unwrap().value, 2.0);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let (nx, nu) = (4, 2);
        let c = cost(nx, nu);
        let ar = residual(nx, nu);
        let x = StateVector::from_column_slice(&[0.7, -0.2, 1.3, 0.4]);
        let u = ControlVector::from_column_slice(&[0.9, -1.4]);
        let e = c.running(&x, &u, Some(&ar)).unwrap();
        let h = 1e-6;
        let f = |x: &StateVector, u: &ControlVector| c.running(x, u, Some(&ar)).unwrap();
        for i in 0..nx {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&xp, &u).value - f(&xm, &u).value) / (2.0 * h);
            assert!((fd - e.l_x[i]).abs() <= 1e-6 * e.l_x[i].abs().max(1.0));
            let fd2 = (f(&xp, &u).l_x - f(&xm, &u).l_x) / (2.0 * h);
            assert!((fd2 - e.l_xx.column(i)).amax() <= 1e-6 * e.l_xx.amax());
        }
        for i in 0..nu {
            let mut up = u.clone();
            up[i] += h;
            let mut um = u.clone();
            um[i] -= h;
            let fd = (f(&x, &up).value - f(&x, &um).value) / (2.0 * h);
            assert!((fd - e.l_u[i]).abs() <= 1e-6 * e.l_u[i].abs().max(1.0));
            let fd2 = (f(&x, &up).l_u - f(&x, &um).l_u) / (2.0 * h);
            assert!((fd2 - e.l_uu.column(i)).amax() <= 1e-6 * e.l_uu.amax());
            // l_ux: derivative of l_x wrt u is zero
            assert!((f(&x, &up).l_x - f(&x, &um).l_x).amax() < 1e-9);
        }
        let t = c.terminal(&x).unwrap();
        for i in 0..nx {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (c.terminal_value(&xp) - c.terminal_value(&xm)) / (2.0 * h);
            assert!((fd - t.l_x[i]).abs() <= 1e-6 * t.l_x[i].abs().max(1.0));
        }
    }

    #[test]
    fn hessians_are_constant_and_symmetric() {
        let c = cost(3, 2);
        let ar = residual(3, 2);
        let a = c.running(&StateVector::zeros(3), &ControlVector::zeros(2), Some(&ar)).unwrap();
        let b = c
            .running(&StateVector::from_element(3, 5.0), &ControlVector::from_element(2, -2.0), Some(&ar))
            .unwrap();
        assert_eq!(a.l_xx, b.l_xx);
        assert_eq!(a.l_uu, b.l_uu);
        assert_eq!(a.l_xx, a.l_xx.transpose());
        assert_eq!(a.l_xx, &c.q * 2.0 + DMatrix::identity(3, 3) * 10.0);
    }

    #[test]
    fn rejects_indefinite_and_mismatched() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(QuadraticCost::new(bad, DMatrix::identity(1, 1), DMatrix::identity(2, 2), StateVector::zeros(2)).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(QuadraticCost::new(asym, DMatrix::identity(1, 1), DMatrix::identity(2, 2), StateVector::zeros(2)).is_err());
        let c = cost(3, 1);
        assert!(c.running(&StateVector::zeros(2), &ControlVector::zeros(1), None).is_err());
        let mut ar = residual(3, 1);
        ar.lambda_u = ControlVector::zeros(2);
        assert!(c.running(&StateVector::zeros(3), &ControlVector::zeros(1), Some(&ar)).is_err());
    }

    proptest! {
        #[test]
        fn nonnegative_and_rho_zero_reduces(xs in prop::collection::vec(-5.0..5.0f64, 4), us in prop::collection::vec(-5.0..5.0f64, 2)) {
            let c = cost(4, 2);
            let x = StateVector::from_vec(xs);
            let u = ControlVector::from_vec(us);
            let with = c.running(&x, &u, Some(&residual(4, 2))).unwrap();
            prop_assert!(with.value >= 0.0);
            let mut ar0 = residual(4, 2);
            ar0.rho_x = 0.0;
            ar0.rho_u = 0.0;
            let plain = c.running(&x, &u, Some(&ar0)).unwrap();
            prop_assert_eq!(plain.value, c.tracking(&x, &u));
            prop_assert!(c.terminal(&x).unwrap().value >= 0.0);
        }
    }
}
