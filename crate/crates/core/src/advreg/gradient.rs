use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{l2, PerturbationConfig, PerturbationTape};
use crate::error::{Error, Result};
use crate::policy::Mlp;

/// Samples per parallel work unit. Partial sums are reduced in chunk order so
/// results do not depend on the thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub z: Vec<f64>,
    pub u: Vec<f64>,
}

/// Behavioral-cloning data: every `(z, u)` pair from `n_trajectories`
/// trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct BcData {
    pub samples: Vec<Sample>,
    pub n_trajectories: usize,
    /// Divide the summed loss by the sample count instead of the trajectory
    /// count.
    pub normalize_by_steps: bool,
}

impl BcData {
    pub fn new(samples: Vec<Sample>, n_trajectories: usize) -> Self {
        Self {
            samples,
            n_trajectories,
            normalize_by_steps: false,
        }
    }

    pub fn normalizer(&self) -> f64 {
        if self.normalize_by_steps {
            self.samples.len() as f64
        } else {
            self.n_trajectories as f64
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.samples.is_empty() || self.n_trajectories == 0 {
            return Err(Error::Contract("behavioral-cloning batch is empty".into()));
        }
        Ok(())
    }
}

/// `(1/N) sum |pi(z) - u|^2`.
pub fn bc_loss(data: &BcData, net: &Mlp) -> Result<f64> {
    data.check()?;
    let partial: Vec<f64> = data
        .samples
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<f64> {
            let mut acc = 0.0;
            for s in chunk {
                let y = net.forward(&s.z)?;
                acc += y.iter().zip(&s.u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(partial.iter().sum::<f64>() / data.normalizer())
}

/// Gradient of the regularized cloning objective, split by origin.
///
/// `leader` and `interaction` exclude the factor `alpha`, so
/// `ar = bc + alpha * leader` and `sar = ar + alpha * interaction`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientParts {
    pub bc: Vec<f64>,
    pub leader: Vec<f64>,
    pub interaction: Vec<f64>,
    pub alpha: f64,
    /// Summed squared cloning error over the batch.
    pub sq_error: f64,
    /// Summed discrepancy at the final perturbations.
    pub discrepancy: f64,
}

impl GradientParts {
    fn zeros(n: usize, alpha: f64) -> Self {
        Self {
            bc: vec![0.0; n],
            leader: vec![0.0; n],
            interaction: vec![0.0; n],
            alpha,
            sq_error: 0.0,
            discrepancy: 0.0,
        }
    }

    fn add(&mut self, other: &Self) {
        for (a, b) in [
            (&mut self.bc, &other.bc),
            (&mut self.leader, &other.leader),
            (&mut self.interaction, &other.interaction),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.sq_error += other.sq_error;
        self.discrepancy += other.discrepancy;
    }

    pub fn ar(&self) -> Vec<f64> {
        self.bc.iter().zip(&self.leader).map(|(b, l)| b + self.alpha * l).collect()
    }

    pub fn sar(&self) -> Vec<f64> {
        self.ar()
            .iter()
            .zip(&self.interaction)
            .map(|(a, i)| a + self.alpha * i)
            .collect()
    }

    /// Leader-follower term scaled by `alpha`.
    pub fn scaled_interaction(&self) -> Vec<f64> {
        self.interaction.iter().map(|i| self.alpha * i).collect()
    }
}

/// Transposed Jacobian of the radial projection at an outside candidate
/// `v`: `(eps/|v|) (I - v v^T / |v|^2)`, applied to `a`.
fn projection_vjp(v: &[f64], epsilon: f64, a: &[f64]) -> Vec<f64> {
    let norm = l2(v);
    let dot: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() / (norm * norm);
    let s = epsilon / norm;
    a.iter().zip(v).map(|(ai, vi)| s * (ai - dot * vi)).collect()
}

/// Adds one sample's contributions into `out`, each scaled by `scale`.
fn accumulate_sample(
    net: &Mlp,
    sample: &Sample,
    tape: Option<&PerturbationTape>,
    cfg: &PerturbationConfig,
    with_interaction: bool,
    scale: f64,
    out: &mut GradientParts,
) -> Result<()> {
    let z = &sample.z;
    let t0 = net.trace(z)?;
    let y0 = t0.output().to_vec();
    if sample.u.len() != y0.len() {
        return Err(Error::Contract("target control has wrong dimension".into()));
    }
    let e_bc: Vec<f64> = y0.iter().zip(&sample.u).map(|(a, b)| a - b).collect();
    out.sq_error += e_bc.iter().map(|v| v * v).sum::<f64>();
    let up: Vec<f64> = e_bc.iter().map(|v| 2.0 * v).collect();
    net.backward(&t0, &up, Some(&mut out.bc), scale);

    let Some(tape) = tape else {
        return Ok(());
    };
    let zp: Vec<f64> = z.iter().zip(tape.last()).map(|(a, b)| a + b).collect();
    let tp = net.trace(&zp)?;
    let e: Vec<f64> = y0.iter().zip(tp.output()).map(|(a, b)| a - b).collect();
    out.discrepancy += e.iter().map(|v| v * v).sum::<f64>();

    // dr/dW at fixed delta: 2 (dpi(z)/dW - dpi(z+d)/dW)^T e
    let two_e: Vec<f64> = e.iter().map(|v| 2.0 * v).collect();
    let neg_two_e: Vec<f64> = e.iter().map(|v| -2.0 * v).collect();
    net.backward(&t0, &two_e, Some(&mut out.leader), scale);
    let mut adj = net.backward(&tp, &neg_two_e, Some(&mut out.leader), scale);

    if !with_interaction {
        return Ok(());
    }
    // Reverse sweep over the ascent steps. `adj` holds dr/d(delta_k).
    cfg.mask(&mut adj);
    let eta = cfg.eta_delta;
    for k in (0..tape.steps.len()).rev() {
        let step = &tape.steps[k];
        let mut a_v = if step.projected {
            projection_vjp(&step.candidate, cfg.epsilon, &adj)
        } else {
            adj.clone()
        };
        cfg.mask(&mut a_v);
        let zk: Vec<f64> = z.iter().zip(&tape.deltas[k]).map(|(a, b)| a + b).collect();
        let tt = net.tangent_trace(&zk, &a_v)?;
        // s = grad_d r . a_v = -2 e_k^T J(z + d_k) a_v
        let e_k: Vec<f64> = y0.iter().zip(tt.output()).map(|(a, b)| a - b).collect();
        let ydot = tt.output_tangent().to_vec();
        let neg_ydot: Vec<f64> = ydot.iter().map(|v| -v).collect();
        let c = -2.0 * eta * scale;
        net.backward(&t0, &ydot, Some(&mut out.interaction), c);
        let (ds_dd, _) = net.backward_tangent(&tt, &neg_ydot, &e_k, Some(&mut out.interaction), c);
        adj = a_v
            .iter()
            .zip(&ds_dd)
            .map(|(a, g)| a - 2.0 * eta * g)
            .collect();
        cfg.mask(&mut adj);
    }
    Ok(())
}

/// Sums per-sample contributions over `indices`, scaled by `scale`, in a
/// thread-count independent order.
pub(crate) fn accumulate(
    net: &Mlp,
    samples: &[Sample],
    indices: &[usize],
    tapes: Option<&[PerturbationTape]>,
    cfg: &PerturbationConfig,
    with_interaction: bool,
    scale: f64,
) -> Result<GradientParts> {
    let n = net.num_params();
    let partial: Vec<GradientParts> = indices
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| -> Result<GradientParts> {
            let mut parts = GradientParts::zeros(n, cfg.alpha);
            for (j, &i) in chunk.iter().enumerate() {
                let tape = tapes.map(|t| &t[c * CHUNK + j]);
                accumulate_sample(net, &samples[i], tape, cfg, with_interaction, scale, &mut parts)?;
            }
            Ok(parts)
        })
        .collect::<Result<_>>()?;
    let mut total = GradientParts::zeros(n, cfg.alpha);
    for p in &partial {
        total.add(p);
    }
    Ok(total)
}

/// Full-batch gradient parts for the given tapes (one per sample, or none
/// for plain cloning).
pub fn policy_gradient_parts(
    data: &BcData,
    net: &Mlp,
    cfg: &PerturbationConfig,
    tapes: Option<&[PerturbationTape]>,
    with_interaction: bool,
) -> Result<GradientParts> {
    data.check()?;
    if let Some(t) = tapes {
        if t.len() != data.samples.len() {
            return Err(Error::Contract("one perturbation tape per sample required".into()));
        }
    }
    let indices: Vec<usize> = (0..data.samples.len()).collect();
    accumulate(net, &data.samples, &indices, tapes, cfg, with_interaction, 1.0 / data.normalizer())
}

fn draw_tapes<R: Rng + ?Sized>(data: &BcData, net: &Mlp, cfg: &PerturbationConfig, rng: &mut R) -> Result<Vec<PerturbationTape>> {
    data.samples.iter().map(|s| super::inner_maximize(net, &s.z, cfg, rng)).collect()
}

/// Conventional adversarial regularization: perturbations treated as
/// constants when differentiating with respect to `W`.
pub fn ar_policy_gradient<R: Rng + ?Sized>(data: &BcData, net: &Mlp, cfg: &PerturbationConfig, rng: &mut R) -> Result<Vec<f64>> {
    let tapes = draw_tapes(data, net, cfg, rng)?;
    Ok(policy_gradient_parts(data, net, cfg, Some(&tapes), false)?.ar())
}

/// Stackelberg gradient: leader terms plus the leader-follower interaction
/// through the unrolled ascent steps.
pub fn sar_policy_gradient<R: Rng + ?Sized>(data: &BcData, net: &Mlp, cfg: &PerturbationConfig, rng: &mut R) -> Result<Vec<f64>> {
    let tapes = draw_tapes(data, net, cfg, rng)?;
    Ok(policy_gradient_parts(data, net, cfg, Some(&tapes), true)?.sar())
}

/// Gaussian input augmentation baseline: `z + N(0, sigma^2 I)` on the
/// first `dims` entries (all when `None`), targets unchanged.
pub fn gaussian_baseline_batch<R: Rng + ?Sized>(
    batch: &[Sample],
    sigma: f64,
    dims: Option<usize>,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    if !(sigma >= 0.0) {
        return Err(Error::Contract(format!("gaussian sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(batch.to_vec());
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    Ok(batch
        .iter()
        .map(|s| {
            let n = dims.unwrap_or(s.z.len()).min(s.z.len());
            let mut z = s.z.clone();
            z.iter_mut().take(n).for_each(|v| *v += normal.sample(rng));
            Sample { z, u: s.u.clone() }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::{discrepancy, unroll_perturbation};
    use super::*;
    use crate::policy::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_data(seed: u64, n_traj: usize, per: usize, dz: usize, du: usize) -> BcData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n_traj * per)
            .map(|_| Sample {
                z: (0..dz).map(|_| rng.random_range(-1.0..1.0)).collect(),
                u: (0..du).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        BcData::new(samples, n_traj)
    }

    #[test]
    fn bc_loss_examples() {
        let net = Mlp::init(&[2, 4, 1], Activation::Tanh, 1).unwrap();
        let exact: Vec<Sample> = [[0.1, 0.2], [0.5, -0.3]]
            .iter()
            .map(|z| Sample {
                z: z.to_vec(),
                u: net.forward(z).unwrap(),
            })
            .collect();
        assert_eq!(bc_loss(&BcData::new(exact, 2), &net).unwrap(), 0.0);

        let z = vec![0.3, 0.4];
        let mut u = net.forward(&z).unwrap();
        u[0] -= 1.0;
        let one = BcData::new(vec![Sample { z, u }], 4);
        assert!((bc_loss(&one, &net).unwrap() - 0.25).abs() < 1e-15);

        assert!(bc_loss(&BcData::new(vec![], 1), &net).is_err());
    }

    #[test]
    fn bc_loss_matches_naive_resummation() {
        let net = Mlp::init(&[3, 8, 2], Activation::Tanh, 6).unwrap();
        let data = toy_data(2, 7, 50, 3, 2);
        let mut naive = 0.0;
        for s in data.samples.iter().rev() {
            let y = net.forward(&s.z).unwrap();
            for k in 0..2 {
                naive += (y[k] - s.u[k]).powi(2);
            }
        }
        naive /= 7.0;
        assert!((bc_loss(&data, &net).unwrap() - naive).abs() <= 1e-12);
    }

    #[test]
    fn alpha_zero_and_zero_delta() {
        let net = Mlp::init(&[3, 8, 2], Activation::Tanh, 6).unwrap();
        let data = toy_data(3, 2, 5, 3, 2);
        let cfg0 = PerturbationConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let bc = policy_gradient_parts(&data, &net, &cfg0, None, false).unwrap().bc;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(ar_policy_gradient(&data, &net, &cfg0, &mut rng).unwrap(), bc);
        assert_eq!(sar_policy_gradient(&data, &net, &cfg0, &mut rng).unwrap(), bc);

        // forced zero perturbation: r and dr/dW vanish
        let cfg = PerturbationConfig {
            k_steps: 0,
            ..Default::default()
        };
        let tapes: Vec<_> = data
            .samples
            .iter()
            .map(|s| unroll_perturbation(&net, &s.z, vec![0.0; 3], &cfg).unwrap())
            .collect();
        let parts = policy_gradient_parts(&data, &net, &cfg, Some(&tapes), true).unwrap();
        assert!(parts.leader.iter().all(|v| *v == 0.0));
        assert_eq!(parts.ar(), parts.bc);
    }

    #[test]
    fn gaussian_augmentation() {
        let data = toy_data(4, 1, 4000, 2, 1);
        let same = gaussian_baseline_batch(&data.samples, 0.0, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(same, data.samples);
        let sigma = 0.05;
        let a = gaussian_baseline_batch(&data.samples, sigma, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = gaussian_baseline_batch(&data.samples, sigma, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let n = (data.samples.len() * 2) as f64;
        let mean: f64 = a
            .iter()
            .zip(&data.samples)
            .flat_map(|(x, y)| x.z.iter().zip(&y.z).map(|(p, q)| p - q))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 4.0 * sigma / n.sqrt());
        assert!(a.iter().zip(&data.samples).all(|(x, y)| x.u == y.u));
    }

    fn objective_fixed_delta(net: &Mlp, data: &BcData, deltas: &[Vec<f64>], alpha: f64) -> f64 {
        let mut r = 0.0;
        for (s, d) in data.samples.iter().zip(deltas) {
            r += discrepancy(net, &s.z, d).unwrap();
        }
        bc_loss(data, net).unwrap() + alpha * r / data.normalizer()
    }

    #[test]
    fn ar_gradient_matches_fd_at_fixed_delta() {
        let net = Mlp::init(&[3, 6, 6, 2], Activation::Tanh, 12).unwrap();
        let data = toy_data(5, 2, 3, 3, 2);
        let cfg = PerturbationConfig {
            epsilon: 0.1,
            sigma: 0.05,
            k_steps: 2,
            eta_delta: 0.5,
            alpha: 1.5,
            perturb_dims: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tapes: Vec<_> = data
            .samples
            .iter()
            .map(|s| super::super::inner_maximize(&net, &s.z, &cfg, &mut rng).unwrap())
            .collect();
        let deltas: Vec<Vec<f64>> = tapes.iter().map(|t| t.last().to_vec()).collect();
        let g = policy_gradient_parts(&data, &net, &cfg, Some(&tapes), false).unwrap().ar();
        let h = 1e-6;
        for i in 0..net.num_params() {
            let mut p = net.params().to_vec();
            p[i] += h;
            let up = objective_fixed_delta(&net.with_params(p.clone()).unwrap(), &data, &deltas, cfg.alpha);
            p[i] -= 2.0 * h;
            let dn = objective_fixed_delta(&net.with_params(p).unwrap(), &data, &deltas, cfg.alpha);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-2), "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn alpha_scaling_is_linear() {
        let net = Mlp::init(&[3, 8, 2], Activation::Tanh, 2).unwrap();
        let data = toy_data(6, 3, 4, 3, 2);
        let cfg = PerturbationConfig {
            epsilon: 0.05,
            sigma: 0.02,
            k_steps: 2,
            eta_delta: 0.3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tapes: Vec<_> = data
            .samples
            .iter()
            .map(|s| super::super::inner_maximize(&net, &s.z, &cfg, &mut rng).unwrap())
            .collect();
        let a = policy_gradient_parts(&data, &net, &cfg, Some(&tapes), true).unwrap();
        let cfg2 = PerturbationConfig {
            alpha: 2.0 * cfg.alpha,
            ..cfg.clone()
        };
        let b = policy_gradient_parts(&data, &net, &cfg2, Some(&tapes), true).unwrap();
        for i in 0..net.num_params() {
            assert_eq!(b.alpha * b.leader[i], 2.0 * (a.alpha * a.leader[i]));
            assert_eq!(b.alpha * b.interaction[i], 2.0 * (a.alpha * a.interaction[i]));
        }
    }
    fn unrolled_objective(net: &Mlp, data: &BcData, delta0: &[Vec<f64>], cfg: &PerturbationConfig) -> f64 {
        let mut r = 0.0;
        for (s, d0) in data.samples.iter().zip(delta0) {
            let tape = unroll_perturbation(net, &s.z, d0.clone(), cfg).unwrap();
            r += discrepancy(net, &s.z, tape.last()).unwrap();
        }
        bc_loss(data, net).unwrap() + cfg.alpha * r / data.normalizer()
    }

    fn check_sar_fd(cfg: PerturbationConfig, expect_projection: bool) {
        let net = Mlp::init(&[3, 6, 6, 2], Activation::Tanh, 21).unwrap();
        let data = toy_data(8, 2, 3, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let delta0: Vec<Vec<f64>> = data
            .samples
            .iter()
            .map(|_| super::super::sample_initial(3, &cfg, &mut rng))
            .collect();
        let tapes: Vec<_> = data
            .samples
            .iter()
            .zip(&delta0)
            .map(|(s, d)| unroll_perturbation(&net, &s.z, d.clone(), &cfg).unwrap())
            .collect();
        let any_projected = tapes.iter().any(|t| t.steps.iter().any(|s| s.projected));
        assert_eq!(any_projected, expect_projection);
        let parts = policy_gradient_parts(&data, &net, &cfg, Some(&tapes), true).unwrap();
        let g = parts.sar();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..net.num_params() {
            let mut p = net.params().to_vec();
            p[i] += h;
            let up = unrolled_objective(&net.with_params(p.clone()).unwrap(), &data, &delta0, &cfg);
            p[i] -= 2.0 * h;
            let dn = unrolled_objective(&net.with_params(p).unwrap(), &data, &delta0, &cfg);
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1e-2));
        }
        assert!(worst <= 1e-4, "relative error {worst}");
        // the interaction term is not negligible in these settings
        assert!(l2(&parts.interaction) > 1e-3 * l2(&parts.leader));
    }

    #[test]
    fn sar_gradient_matches_fd_of_unrolled_objective() {
        for k in [1, 2] {
            // inside the ball: no projection
            check_sar_fd(
                PerturbationConfig {
                    epsilon: 10.0,
                    sigma: 0.3,
                    k_steps: k,
                    eta_delta: 0.5,
                    alpha: 2.0,
                    perturb_dims: None,
                },
                false,
            );
            // every step lands outside the ball
            check_sar_fd(
                PerturbationConfig {
                    epsilon: 0.05,
                    sigma: 0.2,
                    k_steps: k,
                    eta_delta: 0.5,
                    alpha: 2.0,
                    perturb_dims: None,
                },
                true,
            );
        }
    }

    #[test]
    fn sar_gradient_with_masked_dims() {
        check_sar_fd(
            PerturbationConfig {
                epsilon: 0.05,
                sigma: 0.2,
                k_steps: 2,
                eta_delta: 0.5,
                alpha: 1.0,
                perturb_dims: Some(2),
            },
            true,
        );
    }
}
