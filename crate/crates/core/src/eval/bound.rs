//! Value-discrepancy bound for Lipschitz policies under input disturbances,
//! checked on linear systems with affine policies and quadratic costs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `x' = A x + B u`, `u = K x + b`, stage cost `x^T Q x + u^T R u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDiagnostic {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub x0: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundDiagnostic {
    pub gamma: f64,
    pub zeta: f64,
    pub horizon: usize,
    /// Bound on every state norm reached within the horizon.
    pub state_radius: f64,
    pub c_pi: f64,
    pub c_f_pi: f64,
    pub c_f_u: f64,
    pub c_l_u: f64,
    pub c_l_pi: f64,
    pub c_j: f64,
    pub empirical_discrepancy: f64,
    pub bound_value: f64,
}

impl BoundDiagnostic {
    pub fn holds(&self) -> bool {
        self.empirical_discrepancy <= self.bound_value
    }
}

fn spectral(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

impl LinearDiagnostic {
    fn check(&self) -> Result<()> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let ok = self.a.is_square()
            && self.b.nrows() == n
            && self.q.shape() == (n, n)
            && self.r.shape() == (m, m)
            && self.k.shape() == (m, n)
            && self.bias.len() == m
            && self.x0.len() == n;
        if !ok {
            return Err(Error::Contract("linear diagnostic has inconsistent shapes".into()));
        }
        Ok(())
    }

    /// Discounted cost over `horizon` steps with the policy fed
    /// `x_t + disturbances[t]`.
    pub fn value(&self, gamma: f64, horizon: usize, disturbances: Option<&[DVector<f64>]>) -> f64 {
        let mut x = self.x0.clone();
        let mut total = 0.0;
        let mut discount = 1.0;
        for t in 0..horizon {
            let input = match disturbances {
                Some(d) => &x + &d[t],
                None => x.clone(),
            };
            let u = &self.k * input + &self.bias;
            total += discount * (x.dot(&(&self.q * &x)) + u.dot(&(&self.r * &u)));
            x = &self.a * &x + &self.b * u;
            discount *= gamma;
        }
        total
    }
}

/// Horizon after which the discount has fallen below `1e-6`.
pub fn truncation_horizon(gamma: f64) -> usize {
    (1e-6f64.ln() / gamma.ln()).ceil().max(1.0) as usize
}

fn sphere_sample<R: Rng + ?Sized>(n: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = v.norm();
        if norm > 0.0 {
            return v * (radius / norm);
        }
    }
}

/// Compares the worst sampled value change under policy-input disturbances
/// of norm `zeta` with the analytic bound
/// `C_pi (C_l^u + gamma C_J C_f^u) / (1 - gamma) * zeta`, where
/// `C_J = C_l^pi / (1 - gamma C_f^pi)`. The cost constants are Lipschitz
/// constants over the ball of every state reachable within the horizon.
pub fn value_bound_check<R: Rng + ?Sized>(
    sys: &LinearDiagnostic,
    gamma: f64,
    zeta: f64,
    horizon: Option<usize>,
    n_samples: usize,
    rng: &mut R,
) -> Result<BoundDiagnostic> {
    sys.check()?;
    if !(gamma > 0.0 && gamma < 1.0) || !(zeta >= 0.0) || n_samples == 0 {
        return Err(Error::Contract("need gamma in (0, 1), zeta >= 0 and at least one sample".into()));
    }
    let closed = &sys.a + &sys.b * &sys.k;
    let c_pi = spectral(&sys.k);
    let c_f_pi = spectral(&closed);
    let c_f_u = spectral(&sys.b);
    if gamma * c_f_pi >= 1.0 {
        return Err(Error::Contract(format!(
            "gamma * C_f_pi = {} violates the contraction hypothesis",
            gamma * c_f_pi
        )));
    }
    let horizon = horizon.unwrap_or_else(|| truncation_horizon(gamma));
    let bias_norm = sys.bias.norm();
    let mut radius = sys.x0.norm();
    let mut r_t = radius;
    for _ in 0..horizon {
        r_t = c_f_pi * r_t + c_f_u * (c_pi * zeta + bias_norm);
        radius = radius.max(r_t);
    }
    let u_bound = c_pi * (radius + zeta) + bias_norm;
    let q_norm = spectral(&sys.q);
    let r_norm = spectral(&sys.r);
    let c_l_u = 2.0 * r_norm * u_bound;
    let c_l_pi = 2.0 * q_norm * radius + 2.0 * c_pi * r_norm * u_bound;
    let c_j = c_l_pi / (1.0 - gamma * c_f_pi);
    let bound_value = c_pi * (c_l_u + gamma * c_j * c_f_u) / (1.0 - gamma) * zeta;

    let n = sys.x0.len();
    let clean = sys.value(gamma, horizon, None);
    let mut worst: f64 = 0.0;
    for _ in 0..n_samples {
        let d: Vec<DVector<f64>> = (0..horizon).map(|_| sphere_sample(n, zeta, rng)).collect();
        worst = worst.max((sys.value(gamma, horizon, Some(&d)) - clean).abs());
    }
    Ok(BoundDiagnostic {
        gamma,
        zeta,
        horizon,
        state_radius: radius,
        c_pi,
        c_f_pi,
        c_f_u,
        c_l_u,
        c_l_pi,
        c_j,
        empirical_discrepancy: worst,
        bound_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, b: f64, k: f64, bias: f64, x0: f64) -> LinearDiagnostic {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        LinearDiagnostic {
            a: m(a),
            b: m(b),
            q: m(1.0),
            r: m(0.5),
            k: m(k),
            bias: DVector::from_element(1, bias),
            x0: DVector::from_element(1, x0),
        }
    }

    #[test]
    fn zero_disturbance() {
        let d = value_bound_check(&scalar(0.5, 1.0, 0.1, 0.0, 1.0), 0.9, 0.0, None, 20, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(d.empirical_discrepancy, 0.0);
        assert_eq!(d.bound_value, 0.0);
    }

    #[test]
    fn scalar_constants_in_closed_form() {
        let (gamma, zeta, x0) = (0.9, 0.05, 1.0);
        let d = value_bound_check(&scalar(0.5, 1.0, 0.1, 0.0, x0), gamma, zeta, None, 1000, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(d.horizon, 132);
        // R_t = 0.6 R_{t-1} + 0.1 zeta decreases from x0 toward its fixed point
        let radius = x0;
        let u = 0.1 * (radius + zeta);
        let c_l_u = 2.0 * 0.5 * u;
        let c_l_pi = 2.0 * radius + 2.0 * 0.1 * 0.5 * u;
        let c_j = c_l_pi / (1.0 - 0.9 * 0.6);
        let bound = 0.1 * (c_l_u + 0.9 * c_j) / 0.1 * zeta;
        assert!((d.c_f_pi - 0.6).abs() < 1e-15);
        assert!((d.state_radius - radius).abs() < 1e-15);
        assert!((d.c_j - c_j).abs() < 1e-12);
        assert!((d.bound_value - bound).abs() < 1e-12);
        assert!(d.empirical_discrepancy > 0.0 && d.holds());
    }

    #[test]
    fn constant_policy_has_zero_bound() {
        let d = value_bound_check(&scalar(0.5, 1.0, 0.0, 0.3, 1.0), 0.9, 0.1, None, 50, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(d.bound_value, 0.0);
        assert_eq!(d.empirical_discrepancy, 0.0);
    }

    #[test]
    fn contraction_hypothesis_enforced() {
        let r = value_bound_check(&scalar(1.5, 1.0, 0.1, 0.0, 1.0), 0.9, 0.1, None, 5, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn bound_never_violated(a in -1.5..1.5f64, b in 0.2..1.5f64, k in -1.0..1.0f64, bias in -0.5..0.5f64,
                                x0 in -2.0..2.0f64, gamma in 0.5..0.95f64, zeta in 0.0..0.2f64, seed in 0u64..1000) {
            let sys = scalar(a, b, k, bias, x0);
            prop_assume!(gamma * (a + b * k).abs() < 1.0);
            let d = value_bound_check(&sys, gamma, zeta, None, 50, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(d.holds(), "{d:?}");
        }
    }
}
