use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gradient::{accumulate, bc_loss, gaussian_baseline_batch, BcData, Sample};
use super::{l2, sample_initial, unroll_perturbation, PerturbationConfig, PerturbationTape, Regularizer};
use crate::error::{Error, Result};
use crate::policy::Mlp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Rescale minibatch gradients to at most this norm.
    pub grad_clip: Option<f64>,
    /// Fraction of final epochs whose end-of-epoch weights are averaged.
    pub averaging_fraction: f64,
    pub regularizer: Regularizer,
    pub perturbation: PerturbationConfig,
    /// Noise level of the Gaussian baseline; defaults to `perturbation.epsilon`.
    pub gaussian_sigma: Option<f64>,
    /// Set by the caller from the run seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            averaging_fraction: 0.25,
            regularizer: Regularizer::Sar,
            perturbation: PerturbationConfig::default(),
            gaussian_sigma: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be > 0 and weight_decay >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if !(self.averaging_fraction > 0.0 && self.averaging_fraction <= 1.0) {
            return bad("averaging_fraction must lie in (0, 1]");
        }
        if matches!(self.gaussian_sigma, Some(s) if !(s >= 0.0)) {
            return bad("gaussian_sigma must be >= 0");
        }
        self.perturbation.validate()
    }

    pub fn gaussian_sigma(&self) -> f64 {
        self.gaussian_sigma.unwrap_or(self.perturbation.epsilon)
    }

    /// Number of trailing epochs that enter the weight average.
    pub fn averaged_epochs(&self) -> usize {
        ((self.epochs as f64 * self.averaging_fraction).ceil() as usize).clamp(1, self.epochs.max(1))
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn from_config(n: usize, cfg: &TrainConfig) -> Self {
        Self::new(n, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] *= 1.0 - self.lr * self.weight_decay;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Cloning loss on the full dataset at the end of the epoch.
    pub q_bc: f64,
    /// Mean normalized discrepancy seen during the epoch (0 without AR/SAR).
    pub regularizer: f64,
    /// Mean minibatch gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Mlp,
    pub history: Vec<EpochRecord>,
    /// Loss before the first update.
    pub initial_q_bc: f64,
    /// Set when training stopped on a non-finite loss or gradient; `net`
    /// then holds the last finite weights.
    pub failure: Option<String>,
}

impl TrainOutcome {
    pub fn final_q_bc(&self) -> f64 {
        self.history.last().map_or(self.initial_q_bc, |r| r.q_bc)
    }
}

/// Minibatch training with the selected gradient estimator, averaging the
/// end-of-epoch weights over the final epochs.
pub fn train_policy(data: &BcData, init: &Mlp, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check()?;
    let initial_q_bc = bc_loss(data, init)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            net: init.clone(),
            history: Vec::new(),
            initial_q_bc,
            failure: None,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = init.clone();
    let mut opt = AdamW::from_config(net.num_params(), cfg);
    let n_samples = data.samples.len();
    let norm = data.normalizer();
    let first_avg = cfg.epochs - cfg.averaged_epochs();
    let mut avg = vec![0.0; net.num_params()];
    let mut n_avg = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n_samples).collect();
    let pcfg = &cfg.perturbation;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut reg_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut n_batches = 0usize;
        let mut failure = None;
        for batch in order.chunks(cfg.batch_size) {
            // per-sample terms scaled to estimate the full-batch gradient
            let scale = n_samples as f64 / (batch.len() as f64 * norm);
            let parts = match cfg.regularizer {
                Regularizer::None => accumulate(&net, &data.samples, batch, None, pcfg, false, scale)?,
                Regularizer::Gaussian => {
                    let picked: Vec<Sample> = batch.iter().map(|&i| data.samples[i].clone()).collect();
                    let noisy = gaussian_baseline_batch(&picked, cfg.gaussian_sigma(), pcfg.perturb_dims, &mut rng)?;
                    let idx: Vec<usize> = (0..noisy.len()).collect();
                    accumulate(&net, &noisy, &idx, None, pcfg, false, scale)?
                }
                Regularizer::Ar | Regularizer::Sar => {
                    let delta0: Vec<Vec<f64>> =
                        batch.iter().map(|&i| sample_initial(data.samples[i].z.len(), pcfg, &mut rng)).collect();
                    let tapes: Vec<PerturbationTape> = batch
                        .par_iter()
                        .zip(delta0)
                        .map(|(&i, d0)| unroll_perturbation(&net, &data.samples[i].z, d0, pcfg))
                        .collect::<Result<_>>()?;
                    let sar = cfg.regularizer == Regularizer::Sar;
                    accumulate(&net, &data.samples, batch, Some(&tapes), pcfg, sar, scale)?
                }
            };
            let mut grad = match cfg.regularizer {
                Regularizer::Sar => parts.sar(),
                Regularizer::Ar => parts.ar(),
                _ => parts.bc.clone(),
            };
            let g_norm = l2(&grad);
            if !g_norm.is_finite() || !parts.sq_error.is_finite() {
                failure = Some(format!("non-finite gradient in epoch {epoch}"));
                break;
            }
            if let Some(c) = cfg.grad_clip {
                if g_norm > c {
                    grad.iter_mut().for_each(|g| *g *= c / g_norm);
                }
            }
            let before = net.params().to_vec();
            opt.step(net.params_mut(), &grad);
            if net.params().iter().any(|p| !p.is_finite()) {
                net.params_mut().copy_from_slice(&before);
                failure = Some(format!("non-finite weights in epoch {epoch}"));
                break;
            }
            reg_sum += parts.discrepancy / (batch.len() as f64) * (n_samples as f64) / norm;
            norm_sum += g_norm;
            n_batches += 1;
        }
        let q_bc = bc_loss(data, &net)?;
        if failure.is_none() && !q_bc.is_finite() {
            failure = Some(format!("non-finite cloning loss in epoch {epoch}"));
        }
        if let Some(msg) = failure {
            let net = if n_avg > 0 {
                net.with_params(avg.iter().map(|v| v / n_avg as f64).collect())?
            } else {
                net
            };
            return Ok(TrainOutcome {
                net,
                history,
                initial_q_bc,
                failure: Some(msg),
            });
        }
        let nb = n_batches.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            q_bc,
            regularizer: reg_sum / nb,
            grad_norm: norm_sum / nb,
        });
        if epoch >= first_avg {
            avg.iter_mut().zip(net.params()).for_each(|(a, p)| *a += p);
            n_avg += 1;
        }
    }
    let net = net.with_params(avg.iter().map(|v| v / n_avg as f64).collect())?;
    // report the loss of the weights actually returned
    if let Some(last) = history.last_mut() {
        last.q_bc = bc_loss(data, &net)?;
    }
    Ok(TrainOutcome {
        net,
        history,
        initial_q_bc,
        failure: None,
    })
}
