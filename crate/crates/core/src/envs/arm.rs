use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_inputs, rk4_step, ControlVector, Dynamics, StateVector};
use crate::error::{Error, Result};

/// Planar serial arm of uniform thin rods moving in a vertical plane.
///
/// Joint angles are relative; the first is measured from the +x axis, so
/// `q = 0` is the arm stretched out horizontally and `q = (-pi/2, 0, ..)`
/// hangs straight down. Gravity acts along -y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanarArmParams {
    pub n_links: usize,
    pub link_masses: Vec<f64>,
    pub link_lengths: Vec<f64>,
    pub gravity: f64,
    pub dt: f64,
}

impl Default for PlanarArmParams {
    fn default() -> Self {
        Self {
            n_links: 2,
            link_masses: vec![1.0, 1.0],
            link_lengths: vec![0.5, 0.5],
            gravity: 9.81,
            dt: 0.01,
        }
    }
}

impl PlanarArmParams {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.n_links) {
            return Err(Error::Parameter(format!("n_links must be 2 or 3, got {}", self.n_links)));
        }
        if self.link_masses.len() != self.n_links || self.link_lengths.len() != self.n_links {
            return Err(Error::Parameter("link mass/length lists must have n_links entries".into()));
        }
        let positive = self
            .link_masses
            .iter()
            .chain(&self.link_lengths)
            .chain(std::iter::once(&self.dt))
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive || !self.gravity.is_finite() {
            return Err(Error::Parameter(format!("arm masses, lengths and dt must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn mass_scaled(&self, delta_mass: f64) -> Result<Self> {
        let link_masses: Vec<f64> = self.link_masses.iter().map(|m| m - delta_mass).collect();
        if link_masses.iter().any(|m| *m <= 0.0) {
            return Err(Error::Parameter(format!(
                "mass reduction {delta_mass} leaves a non-positive link mass"
            )));
        }
        Ok(Self {
            link_masses,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanarArm {
    params: PlanarArmParams,
}

impl PlanarArm {
    pub fn new(params: PlanarArmParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &PlanarArmParams {
        &self.params
    }

    fn n(&self) -> usize {
        self.params.n_links
    }

    fn absolute_angles(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .scan(0.0, |acc, qi| {
                *acc += qi;
                Some(*acc)
            })
            .collect()
    }

    /// Lever arm of link `j`'s direction inside the center of mass of link `i`.
    fn lever(&self, i: usize, j: usize) -> f64 {
        if j < i {
            self.params.link_lengths[j]
        } else {
            0.5 * self.params.link_lengths[i]
        }
    }

    /// Mass matrix and its partial derivatives `dM/dq_m`.
    pub fn mass_matrix(&self, q: &[f64]) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let n = self.n();
        let phi = self.absolute_angles(q);
        let mut m = DMatrix::zeros(n, n);
        let mut dm = vec![DMatrix::zeros(n, n); n];
        for i in 0..n {
            let mass = self.params.link_masses[i];
            let inertia = mass * self.params.link_lengths[i].powi(2) / 12.0;
            for k in 0..=i {
                for l in 0..=i {
                    let mut acc = inertia;
                    for a in k..=i {
                        for b in l..=i {
                            let w = self.lever(i, a) * self.lever(i, b);
                            let d = phi[a] - phi[b];
                            acc += mass * w * d.cos();
                            let s = -mass * w * d.sin();
                            // d(phi_a - phi_b)/dq_r = [r <= a] - [r <= b]
                            for (r, dmr) in dm.iter_mut().enumerate() {
                                let coef = (r <= a) as i32 - (r <= b) as i32;
                                if coef != 0 {
                                    dmr[(k, l)] += s * coef as f64;
                                }
                            }
                        }
                    }
                    m[(k, l)] += acc;
                }
            }
        }
        (m, dm)
    }

    /// Coriolis/centrifugal vector `C(q, qd) qd` from Christoffel symbols.
    pub fn coriolis(&self, q: &[f64], qd: &[f64]) -> DVector<f64> {
        let n = self.n();
        let (_, dm) = self.mass_matrix(q);
        DVector::from_fn(n, |k, _| {
            let mut c = 0.0;
            for l in 0..n {
                for r in 0..n {
                    let gamma = 0.5 * (dm[r][(k, l)] + dm[l][(k, r)] - dm[k][(l, r)]);
                    c += gamma * qd[l] * qd[r];
                }
            }
            c
        })
    }

    /// Gravity torque `g(q) = dV/dq`.
    pub fn gravity_torque(&self, q: &[f64]) -> DVector<f64> {
        let n = self.n();
        let phi = self.absolute_angles(q);
        let g = self.params.gravity;
        DVector::from_fn(n, |k, _| {
            let mut acc = 0.0;
            for i in k..n {
                let mass = self.params.link_masses[i];
                for j in k..=i {
                    acc += mass * g * self.lever(i, j) * phi[j].cos();
                }
            }
            acc
        })
    }

    /// End-effector position in the arm plane.
    pub fn end_effector(&self, q: &[f64]) -> (f64, f64) {
        self.absolute_angles(q)
            .iter()
            .zip(&self.params.link_lengths)
            .fold((0.0, 0.0), |(x, y), (phi, l)| (x + l * phi.cos(), y + l * phi.sin()))
    }

    pub fn derivative(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
        let n = self.n();
        let q = &x.as_slice()[..n];
        let qd = &x.as_slice()[n..];
        let (m, _) = self.mass_matrix(q);
        let rhs = u - self.coriolis(q, qd) - self.gravity_torque(q);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Dynamics(format!("mass matrix not positive definite at q={q:?}")))?;
        let qdd = chol.solve(&rhs);
        let mut out = StateVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from_slice(qd);
        out.rows_mut(n, n).copy_from(&qdd);
        Ok(out)
    }
}

impl Dynamics for PlanarArm {
    fn state_dim(&self) -> usize {
        2 * self.n()
    }

    fn control_dim(&self) -> usize {
        self.n()
    }

    fn step(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
        check_inputs(x, u, 2 * self.n(), self.n())?;
        rk4_step(|x, u| self.derivative(x, u), x, u, self.params.dt)
    }

    /// Kinetic plus potential energy; the potential is measured from the
    /// lowest reachable height of each link's center of mass.
    fn energy(&self, x: &StateVector) -> f64 {
        let n = self.n();
        let q = &x.as_slice()[..n];
        let qd = x.rows(n, n);
        let (m, _) = self.mass_matrix(q);
        let kinetic = 0.5 * qd.dot(&(&m * qd));
        let phi = self.absolute_angles(q);
        let g = self.params.gravity;
        let mut potential = 0.0;
        for i in 0..n {
            let mut height = 0.0;
            let mut depth = 0.0;
            for j in 0..=i {
                height += self.lever(i, j) * phi[j].sin();
                depth += self.lever(i, j);
            }
            potential += self.params.link_masses[i] * g * (height + depth);
        }
        kinetic + potential
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn arm(n: usize) -> PlanarArm {
        PlanarArm::new(PlanarArmParams {
            n_links: n,
            link_masses: vec![1.2, 0.8, 0.5][..n].to_vec(),
            link_lengths: vec![0.6, 0.5, 0.3][..n].to_vec(),
            gravity: 9.81,
            dt: 0.01,
        })
        .unwrap()
    }

    // Independent potential energy: heights of rod midpoints by walking the chain.
    fn potential_oracle(p: &PlanarArmParams, q: &[f64]) -> f64 {
        let (mut y, mut phi, mut v) = (0.0, 0.0, 0.0);
        for i in 0..p.n_links {
            phi += q[i];
            let mid = y + 0.5 * p.link_lengths[i] * phi.sin();
            v += p.link_masses[i] * p.gravity * mid;
            y += p.link_lengths[i] * phi.sin();
        }
        v
    }

    fn kinetic_oracle(p: &PlanarArmParams, q: &[f64], qd: &[f64]) -> f64 {
        let (mut px, mut py, mut vx, mut vy, mut phi, mut w) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let mut t = 0.0;
        for i in 0..p.n_links {
            phi += q[i];
            w += qd[i];
            let (s, c) = phi.sin_cos();
            let h = 0.5 * p.link_lengths[i];
            let (mvx, mvy) = (vx - h * s * w, vy + h * c * w);
            t += 0.5 * p.link_masses[i] * (mvx * mvx + mvy * mvy)
                + 0.5 * p.link_masses[i] * p.link_lengths[i].powi(2) / 12.0 * w * w;
            px += p.link_lengths[i] * c;
            py += p.link_lengths[i] * s;
            vx -= p.link_lengths[i] * s * w;
            vy += p.link_lengths[i] * c * w;
        }
        let _ = (px, py);
        t
    }

    #[test]
    fn gravity_matches_potential_gradient() {
        for n in [2, 3] {
            let a = arm(n);
            let q: Vec<f64> = vec![0.3, -1.1, 0.7][..n].to_vec();
            let g = a.gravity_torque(&q);
            for k in 0..n {
                let h = 1e-6;
                let mut qp = q.clone();
                qp[k] += h;
                let mut qm = q.clone();
                qm[k] -= h;
                let fd = (potential_oracle(a.params(), &qp) - potential_oracle(a.params(), &qm)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-7, "n={n} k={k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn mass_matrix_matches_kinetic_energy() {
        for n in [2, 3] {
            let a = arm(n);
            let q: Vec<f64> = vec![0.4, 0.9, -0.5][..n].to_vec();
            let qd: Vec<f64> = vec![1.3, -0.7, 2.1][..n].to_vec();
            let (m, dm) = a.mass_matrix(&q);
            let v = DVector::from_column_slice(&qd);
            let t = 0.5 * v.dot(&(&m * &v));
            assert!((t - kinetic_oracle(a.params(), &q, &qd)).abs() < 1e-12);
            assert!((&m - m.transpose()).amax() < 1e-14);
            for r in 0..n {
                let h = 1e-6;
                let mut qp = q.clone();
                qp[r] += h;
                let mut qm = q.clone();
                qm[r] -= h;
                let fd = (a.mass_matrix(&qp).0 - a.mass_matrix(&qm).0) / (2.0 * h);
                assert!((fd - &dm[r]).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn straight_down_is_fixed() {
        for n in [2, 3] {
            let a = arm(n);
            let mut x = StateVector::zeros(2 * n);
            x[0] = -FRAC_PI_2;
            let next = a.step(&x, &ControlVector::zeros(n)).unwrap();
            assert!((next - &x).amax() <= 1e-12);
        }
    }

    #[test]
    fn gravity_compensation_holds_static_pose() {
        let a = arm(3);
        let q = [0.3, -1.1, 0.7];
        // torque from the independent potential-energy oracle
        let tau = DVector::from_fn(3, |k, _| {
            let h = 1e-6;
            let mut qp = q;
            qp[k] += h;
            let mut qm = q;
            qm[k] -= h;
            (potential_oracle(a.params(), &qp) - potential_oracle(a.params(), &qm)) / (2.0 * h)
        });
        let mut x = StateVector::zeros(6);
        x.rows_mut(0, 3).copy_from_slice(&q);
        let next = a.step(&x, &tau).unwrap();
        assert!((next - &x).amax() < 1e-9);
    }

    #[test]
    fn rk4_matches_fine_step_oracle() {
        let a = arm(2);
        let x = StateVector::from_column_slice(&[0.2, 0.5, -1.0, 0.4]);
        let u = ControlVector::from_column_slice(&[1.5, -0.3]);
        let next = a.step(&x, &u).unwrap();
        let h = a.params().dt / 100.0;
        let mut fine = x.clone();
        for _ in 0..100 {
            fine = rk4_step(|x, u| a.derivative(x, u), &fine, &u, h).unwrap();
        }
        assert!((next - fine).amax() <= 1e-6);
    }

    #[test]
    fn end_effector_stretched() {
        let a = PlanarArm::new(PlanarArmParams {
            link_lengths: vec![1.0, 1.0],
            ..Default::default()
        })
        .unwrap();
        let (x, y) = a.end_effector(&[0.0, 0.0]);
        assert!((x - 2.0).abs() < 1e-15 && y.abs() < 1e-15);
    }

    #[test]
    fn params_validation_and_mismatch() {
        let p = PlanarArmParams::default();
        assert!(PlanarArm::new(PlanarArmParams { n_links: 4, ..p.clone() }).is_err());
        assert!(PlanarArm::new(PlanarArmParams { link_masses: vec![1.0], ..p.clone() }).is_err());
        let s = p.mass_scaled(0.25).unwrap();
        assert_eq!(s.link_masses, vec![0.75, 0.75]);
        assert_eq!(p.mass_scaled(0.0).unwrap(), p);
        assert!(p.mass_scaled(1.0).is_err());
    }
}
