//! Policy rollouts under disturbances and the metrics computed on them.

mod bound;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::policy_input;
use crate::costs::QuadraticCost;
use crate::envs::{ControlVector, StateVector, System};
use crate::error::{Error, Result};
use crate::policy::Mlp;

pub use bound::{value_bound_check, BoundDiagnostic, LinearDiagnostic};

/// Rollouts whose state norm exceeds this are marked diverged.
pub const BLOWUP_NORM: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    None,
    /// Uniform noise in an l-inf ball on the state fed to the policy.
    Sensor,
    /// Uniform noise in an l-inf ball added to every next state.
    Transition,
    /// Every mass reduced by `delta_mass`.
    ModelMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    pub kind: DisturbanceKind,
    #[serde(default)]
    pub zeta: f64,
    #[serde(default)]
    pub delta_mass: f64,
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        Self {
            kind: DisturbanceKind::None,
            zeta: 0.0,
            delta_mass: 0.0,
        }
    }

    pub fn sensor(zeta: f64) -> Self {
        Self {
            kind: DisturbanceKind::Sensor,
            zeta,
            delta_mass: 0.0,
        }
    }

    pub fn transition(zeta: f64) -> Self {
        Self {
            kind: DisturbanceKind::Transition,
            zeta,
            delta_mass: 0.0,
        }
    }

    pub fn mismatch(delta_mass: f64) -> Self {
        Self {
            kind: DisturbanceKind::ModelMismatch,
            zeta: 0.0,
            delta_mass,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zeta >= 0.0) || !self.delta_mass.is_finite() {
            return Err(Error::Contract(format!("invalid disturbance {self:?}")));
        }
        Ok(())
    }

    /// Short label for reports, e.g. `sensor_0.01`.
    pub fn label(&self) -> String {
        match self.kind {
            DisturbanceKind::None => "none".into(),
            DisturbanceKind::Sensor => format!("sensor_{}", self.zeta),
            DisturbanceKind::Transition => format!("transition_{}", self.zeta),
            DisturbanceKind::ModelMismatch => format!("mismatch_{}", self.delta_mass),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// True states; shorter than `T + 1` when the rollout diverged.
    pub states: Vec<StateVector>,
    pub controls: Vec<ControlVector>,
    /// Sum of running tracking costs plus the terminal cost.
    pub cost: f64,
    pub task_error: f64,
    pub diverged: bool,
}

impl RolloutResult {
    /// Cost with diverged rollouts mapped to infinity.
    pub fn effective_cost(&self) -> f64 {
        if self.diverged {
            f64::INFINITY
        } else {
            self.cost
        }
    }

    pub fn final_state(&self) -> &StateVector {
        self.states.last().unwrap()
    }
}

fn uniform_box<R: Rng + ?Sized>(n: usize, zeta: f64, rng: &mut R) -> StateVector {
    StateVector::from_iterator(n, (0..n).map(|_| zeta * (2.0 * rng.random::<f64>() - 1.0)))
}

fn diverged(x: &StateVector) -> bool {
    !x.iter().all(|v| v.is_finite()) || x.norm() > BLOWUP_NORM
}

/// Closed-loop rollout of `net` from `x0` for `horizon` steps.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng + ?Sized>(
    net: &Mlp,
    system: &System,
    x0: &StateVector,
    goal: &[f64],
    cost: &QuadraticCost,
    horizon: usize,
    disturbance: &DisturbanceSpec,
    rng: &mut R,
) -> Result<RolloutResult> {
    disturbance.validate()?;
    let mismatched;
    let plant = if disturbance.kind == DisturbanceKind::ModelMismatch {
        mismatched = system.mass_scaled(disturbance.delta_mass)?;
        &mismatched
    } else {
        system
    };
    let model = plant.dynamics();
    let nx = model.state_dim();
    let mut x = x0.clone();
    let mut states = vec![x.clone()];
    let mut controls = Vec::with_capacity(horizon);
    let mut total = 0.0;
    let mut blown = false;
    for _ in 0..horizon {
        let measured = if disturbance.kind == DisturbanceKind::Sensor && disturbance.zeta > 0.0 {
            &x + uniform_box(nx, disturbance.zeta, rng)
        } else {
            x.clone()
        };
        let u = ControlVector::from_vec(net.forward(&policy_input(&measured, goal))?);
        total += cost.tracking(&x, &u);
        let next = match model.step(&x, &u) {
            Ok(n) => n,
            Err(_) => {
                controls.push(u);
                blown = true;
                break;
            }
        };
        x = if disturbance.kind == DisturbanceKind::Transition && disturbance.zeta > 0.0 {
            next + uniform_box(nx, disturbance.zeta, rng)
        } else {
            next
        };
        controls.push(u);
        states.push(x.clone());
        if diverged(&x) {
            blown = true;
            break;
        }
    }
    if !blown {
        total += cost.terminal_value(&x);
    }
    let task_error = if blown {
        f64::INFINITY
    } else {
        task_error(system, states.last().unwrap(), goal)?
    };
    Ok(RolloutResult {
        states,
        controls,
        cost: total,
        task_error,
        diverged: blown,
    })
}

/// Everything needed for one evaluation rollout.
#[derive(Debug, Clone)]
pub struct RolloutCase {
    pub x0: StateVector,
    pub goal: Vec<f64>,
    pub cost: QuadraticCost,
}

/// Independent seed for rollout `index` of a batch.
pub fn rollout_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Runs every case in parallel with its own RNG stream.
pub fn rollout_batch(
    net: &Mlp,
    system: &System,
    cases: &[RolloutCase],
    horizon: usize,
    disturbance: &DisturbanceSpec,
    seed: u64,
) -> Result<Vec<RolloutResult>> {
    cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed(seed, i));
            rollout(net, system, &c.x0, &c.goal, &c.cost, horizon, disturbance, &mut rng)
        })
        .collect()
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Arm: end-effector distance to the goal pose. Cart-pole: final pole
/// angle from upright, in `[0, pi]`.
pub fn task_error(system: &System, final_state: &StateVector, goal: &[f64]) -> Result<f64> {
    match system {
        System::CartPole(_) => Ok(wrap_angle(final_state[2]).abs()),
        System::PlanarArm(arm) => {
            let n = arm.params().n_links;
            if goal.len() != n {
                return Err(Error::Contract("arm goal must hold one angle per joint".into()));
            }
            let (x, y) = arm.end_effector(&final_state.as_slice()[..n]);
            let (gx, gy) = arm.end_effector(goal);
            Ok(((x - gx).powi(2) + (y - gy).powi(2)).sqrt())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PercentileCurve {
    /// 1, 2, ..., 100.
    pub percentiles: Vec<f64>,
    pub values: Vec<f64>,
    pub capped: Vec<bool>,
    pub cap: Option<f64>,
}

impl PercentileCurve {
    pub fn at(&self, percentile: usize) -> f64 {
        self.values[percentile.clamp(1, 100) - 1]
    }
}

/// Empirical quantile as a right-continuous step: the value at `p` is the
/// `ceil(p n / 100)`-th smallest cost.
pub fn percentile_value(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64 / 100.0).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Percentile curve of `costs`. Values above `cap_multiplier * baseline_max`
/// are reported as the cap.
pub fn cost_percentile(costs: &[f64], baseline_max: Option<f64>, cap_multiplier: f64) -> Result<PercentileCurve> {
    if costs.is_empty() {
        return Err(Error::Contract("percentile of an empty cost list".into()));
    }
    if costs.iter().any(|c| c.is_nan()) {
        return Err(Error::Contract("cost list contains NaN".into()));
    }
    let mut sorted = costs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cap = baseline_max.map(|b| b * cap_multiplier);
    let mut values = Vec::with_capacity(100);
    let mut capped = Vec::with_capacity(100);
    for p in 1..=100 {
        let v = percentile_value(&sorted, p as f64);
        match cap {
            Some(c) if v > c => {
                values.push(c);
                capped.push(true);
            }
            _ => {
                values.push(v);
                capped.push(false);
            }
        }
    }
    Ok(PercentileCurve {
        percentiles: (1..=100).map(f64::from).collect(),
        values,
        capped,
        cap,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimate {
    pub z: Vec<f64>,
    pub epsilon: f64,
    pub estimate: f64,
    pub samples: usize,
}

fn ratio(net: &Mlp, y0: &[f64], z: &[f64], d: &[f64]) -> Result<f64> {
    let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if dn == 0.0 {
        return Ok(0.0);
    }
    let zp: Vec<f64> = z.iter().zip(d).map(|(a, b)| a + b).collect();
    let y = net.forward(&zp)?;
    Ok(y0.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / dn)
}

fn uniform_ball<R: Rng + ?Sized>(dim: usize, active: usize, epsilon: f64, rng: &mut R) -> Vec<f64> {
    let mut d: Vec<f64> = (0..dim)
        .map(|i| if i < active { rng.sample::<f64, _>(StandardNormal) } else { 0.0 })
        .collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let radius = epsilon * rng.random::<f64>().powf(1.0 / active as f64);
    if norm > 0.0 {
        d.iter_mut().for_each(|v| *v *= radius / norm);
    }
    d
}

const REFINE_STEPS: usize = 20;

/// Local Lipschitz estimate `max |pi(z) - pi(z + d)| / |d|` over `m`
/// perturbations with `|d| <= epsilon`. Even-indexed samples are uniform in
/// the ball; odd-indexed ones are refined by normalized projected ascent on
/// the output change. Perturbations touch only the first `dims` entries
/// when set. Samples are drawn in order, so a larger `m` with the same RNG
/// state sees a superset of samples.
pub fn empirical_lipschitz<R: Rng + ?Sized>(
    net: &Mlp,
    z: &[f64],
    epsilon: f64,
    m: usize,
    dims: Option<usize>,
    rng: &mut R,
) -> Result<LipschitzEstimate> {
    if m == 0 || !(epsilon > 0.0) {
        return Err(Error::Contract("Lipschitz estimate needs m >= 1 and epsilon > 0".into()));
    }
    let active = dims.unwrap_or(z.len()).min(z.len());
    let y0 = net.forward(z)?;
    let mut best: f64 = 0.0;
    for i in 0..m {
        let mut d = uniform_ball(z.len(), active, epsilon, rng);
        if i % 2 == 1 {
            for _ in 0..REFINE_STEPS {
                let zp: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + b).collect();
                let trace = net.trace(&zp)?;
                let up: Vec<f64> = trace.output().iter().zip(&y0).map(|(a, b)| 2.0 * (a - b)).collect();
                let mut g = net.backward(&trace, &up, None, 1.0);
                g.iter_mut().skip(active).for_each(|v| *v = 0.0);
                let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if gn == 0.0 {
                    break;
                }
                let step = 0.25 * epsilon / gn;
                let cand: Vec<f64> = d.iter().zip(&g).map(|(a, b)| a + step * b).collect();
                d = crate::advreg::project_ball(&cand, epsilon);
            }
        }
        best = best.max(ratio(net, &y0, z, &d)?);
    }
    Ok(LipschitzEstimate {
        z: z.to_vec(),
        epsilon,
        estimate: best,
        samples: m,
    })
}
