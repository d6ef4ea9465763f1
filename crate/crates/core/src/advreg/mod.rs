//! Adversarial smoothness regularization of the policy.
//!
//! The discrepancy `r(z, W, d) = |pi(z) - pi(z + d)|^2` is maximized over an
//! l2 ball by a few projected gradient-ascent steps, recorded on a
//! [`PerturbationTape`]. The tape is what lets the Stackelberg gradient
//! differentiate the final perturbation with respect to the policy weights.

mod gradient;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Mlp;

pub use gradient::{
    ar_policy_gradient, bc_loss, gaussian_baseline_batch, policy_gradient_parts, sar_policy_gradient, BcData,
    GradientParts, Sample,
};
pub use train::{train_policy, AdamW, EpochRecord, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    Gaussian,
    Ar,
    Sar,
}

impl Regularizer {
    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Gaussian => "gaussian",
            Regularizer::Ar => "ar",
            Regularizer::Sar => "sar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    /// Radius of the l2 ball.
    pub epsilon: f64,
    /// Standard deviation of the initial perturbation.
    pub sigma: f64,
    /// Number of projected ascent steps.
    pub k_steps: usize,
    pub eta_delta: f64,
    /// Regularization weight.
    pub alpha: f64,
    /// Perturb only the first `n` input entries (the state) when set.
    pub perturb_dims: Option<usize>,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            epsilon: 5e-3,
            sigma: 2.5e-3,
            k_steps: 1,
            eta_delta: 5e-3,
            alpha: 1.0,
            perturb_dims: None,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.sigma >= 0.0) || !(self.alpha >= 0.0) || !(self.eta_delta > 0.0) {
            return Err(Error::Config(format!(
                "perturbation requires epsilon, sigma, alpha >= 0 and eta_delta > 0: {self:?}"
            )));
        }
        Ok(())
    }

    fn mask(&self, v: &mut [f64]) {
        if let Some(n) = self.perturb_dims {
            v.iter_mut().skip(n).for_each(|x| *x = 0.0);
        }
    }
}

/// `r = |pi(z) - pi(z + delta)|^2`.
pub fn discrepancy(net: &Mlp, z: &[f64], delta: &[f64]) -> Result<f64> {
    if delta.len() != z.len() {
        return Err(Error::Contract("perturbation and input dims differ".into()));
    }
    let y0 = net.forward(z)?;
    let zp: Vec<f64> = z.iter().zip(delta).map(|(a, b)| a + b).collect();
    let y1 = net.forward(&zp)?;
    Ok(y0.iter().zip(&y1).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `delta` if inside the ball, otherwise scaled radially onto its surface.
pub fn project_ball(delta: &[f64], epsilon: f64) -> Vec<f64> {
    let norm = l2(delta);
    if norm <= epsilon {
        delta.to_vec()
    } else {
        let s = epsilon / norm;
        delta.iter().map(|v| v * s).collect()
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One ascent step `delta_k = Proj[delta_{k-1} + eta * grad]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeStep {
    /// Gradient of `r` at `delta_{k-1}` (after masking).
    pub gradient: Vec<f64>,
    /// Pre-projection candidate.
    pub candidate: Vec<f64>,
    /// Whether the candidate was outside the ball. A candidate exactly on
    /// the boundary counts as inside.
    pub projected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationTape {
    /// `delta_0 .. delta_K`.
    pub deltas: Vec<Vec<f64>>,
    pub steps: Vec<TapeStep>,
}

impl PerturbationTape {
    pub fn last(&self) -> &[f64] {
        self.deltas.last().unwrap()
    }
}

fn discrepancy_grad(net: &Mlp, y0: &[f64], z: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    let zp: Vec<f64> = z.iter().zip(delta).map(|(a, b)| a + b).collect();
    let trace = net.trace(&zp)?;
    // dr/dd = -2 J(z + d)^T (y0 - y)
    let up: Vec<f64> = y0.iter().zip(trace.output()).map(|(a, b)| -2.0 * (a - b)).collect();
    Ok(net.backward(&trace, &up, None, 1.0))
}

/// Runs the projected ascent from a fixed `delta0`.
pub fn unroll_perturbation(net: &Mlp, z: &[f64], delta0: Vec<f64>, cfg: &PerturbationConfig) -> Result<PerturbationTape> {
    if delta0.len() != z.len() {
        return Err(Error::Contract("initial perturbation and input dims differ".into()));
    }
    let y0 = net.forward(z)?;
    let mut deltas = vec![delta0];
    let mut steps = Vec::with_capacity(cfg.k_steps);
    for _ in 0..cfg.k_steps {
        let prev = deltas.last().unwrap();
        let mut gradient = discrepancy_grad(net, &y0, z, prev)?;
        cfg.mask(&mut gradient);
        let candidate: Vec<f64> = prev.iter().zip(&gradient).map(|(d, g)| d + cfg.eta_delta * g).collect();
        let projected = l2(&candidate) > cfg.epsilon;
        deltas.push(project_ball(&candidate, cfg.epsilon));
        steps.push(TapeStep {
            gradient,
            candidate,
            projected,
        });
    }
    Ok(PerturbationTape { deltas, steps })
}

/// Draws `delta0 ~ N(0, sigma^2 I)` (masked) and runs the projected ascent.
pub fn inner_maximize<R: Rng + ?Sized>(net: &Mlp, z: &[f64], cfg: &PerturbationConfig, rng: &mut R) -> Result<PerturbationTape> {
    let delta0 = sample_initial(z.len(), cfg, rng);
    unroll_perturbation(net, z, delta0, cfg)
}

pub(crate) fn sample_initial<R: Rng + ?Sized>(dim: usize, cfg: &PerturbationConfig, rng: &mut R) -> Vec<f64> {
    let mut d: Vec<f64> = if cfg.sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.sigma).unwrap();
        (0..dim).map(|_| normal.sample(rng)).collect()
    } else {
        vec![0.0; dim]
    };
    cfg.mask(&mut d);
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Activation;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(a: &[f64], rows: usize, cols: usize) -> Mlp {
        let mut p = a.to_vec();
        p.extend(vec![0.0; rows]);
        Mlp::new(vec![cols, rows], Activation::Identity, p).unwrap()
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_ball(&[0.003, -0.004], 0.01), vec![0.003, -0.004]);
        let p = project_ball(&[0.06, 0.08], 0.05);
        assert!((p[0] - 0.03).abs() < 1e-15 && (p[1] - 0.04).abs() < 1e-15);
        assert_eq!(project_ball(&[0.0, 0.0], 0.05), vec![0.0, 0.0]);
    }

    #[test]
    fn discrepancy_basics() {
        let net = Mlp::init(&[3, 8, 2], Activation::Tanh, 4).unwrap();
        let z = [0.1, 0.2, -0.3];
        assert_eq!(discrepancy(&net, &z, &[0.0; 3]).unwrap(), 0.0);
        let a = [1.0, 2.0, 0.0, -1.0, 0.5, 3.0];
        let lin = linear(&a, 2, 3);
        let d = [0.01, -0.02, 0.03];
        let ad = [a[0] * d[0] + a[1] * d[1] + a[2] * d[2], a[3] * d[0] + a[4] * d[1] + a[5] * d[2]];
        let expect = ad[0] * ad[0] + ad[1] * ad[1];
        for z in [[0.0, 0.0, 0.0], [5.0, -3.0, 1.0]] {
            assert!((discrepancy(&lin, &z, &d).unwrap() - expect).abs() < 1e-15);
        }
        // swapping base point and perturbed point
        let zp: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + b).collect();
        let back: Vec<f64> = d.iter().map(|v| -v).collect();
        let r1 = discrepancy(&net, &z, &d).unwrap();
        let r2 = discrepancy(&net, &zp, &back).unwrap();
        assert!(r1 >= 0.0 && (r1 - r2).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_keeps_initial_sample() {
        let net = Mlp::init(&[3, 8, 2], Activation::Tanh, 4).unwrap();
        let cfg = PerturbationConfig { k_steps: 0, ..Default::default() };
        let tape = inner_maximize(&net, &[0.1, 0.2, 0.3], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(tape.deltas.len(), 1);
        assert!(tape.steps.is_empty());
    }

    #[test]
    fn ascent_on_linear_policy_is_monotone() {
        let lin = linear(&[2.0, -1.0, 0.5, 1.0, 3.0, -2.0], 2, 3);
        let cfg = PerturbationConfig {
            epsilon: 0.1,
            sigma: 0.01,
            k_steps: 30,
            eta_delta: 0.01,
            ..Default::default()
        };
        let tape = inner_maximize(&lin, &[0.3, 0.1, -0.2], &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let r: Vec<f64> = tape.deltas.iter().map(|d| discrepancy(&lin, &[0.3, 0.1, -0.2], d).unwrap()).collect();
        assert!(r.windows(2).all(|w| w[1] >= w[0] - 1e-15), "{r:?}");
        assert!(r.last().unwrap() > &r[0]);
    }

    #[test]
    fn state_only_mask_leaves_goal_unperturbed() {
        let net = Mlp::init(&[4, 8, 1], Activation::Tanh, 2).unwrap();
        let cfg = PerturbationConfig {
            perturb_dims: Some(3),
            k_steps: 3,
            ..Default::default()
        };
        let tape = inner_maximize(&net, &[0.1, 0.2, 0.3, 0.4], &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert!(tape.deltas.iter().all(|d| d[3] == 0.0));
    }

    proptest! {
        #[test]
        fn projection_lands_in_ball(v in prop::collection::vec(-1.0..1.0f64, 1..6), eps in 0.0..0.5f64) {
            let p = project_ball(&v, eps);
            if l2(&v) <= eps {
                prop_assert_eq!(p, v);
            } else {
                prop_assert!(l2(&p) <= eps + 1e-12);
                // radial: p is a nonnegative multiple of v
                let dot: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
                prop_assert!((dot - l2(&p) * l2(&v)).abs() <= 1e-12);
            }
        }
    }
}
