//! ADMM consensus between per-trajectory optimization and policy learning.
//!
//! Each iteration runs four updates: a primal TO update (DDP with consensus
//! penalties), a policy update (behavioral cloning on the PL copies), a
//! primal PL update and a scaled dual update.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advreg::{bc_loss, train_policy, BcData, Sample, TrainConfig, TrainOutcome};
use crate::costs::{AdmmResidual, QuadraticCost};
use crate::ddp::{solve_ddp, DdpSettings, DdpStatus, Trajectory};
use crate::envs::{ControlVector, Dynamics, StateVector};
use crate::error::{Error, Result};
use crate::policy::Mlp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmSettings {
    pub max_iterations: usize,
    pub rho_x: f64,
    pub rho_u: f64,
    /// Stop after this many iterations without a lower cloning loss.
    pub patience: usize,
    pub pl_steps: usize,
    pub pl_step_size: f64,
    /// Normalize the cloning loss by the number of samples instead of the
    /// number of trajectories.
    pub normalize_by_steps: bool,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 15,
            rho_x: 10.0,
            rho_u: 1.0,
            patience: 2,
            pl_steps: 50,
            pl_step_size: 1e-2,
            normalize_by_steps: false,
        }
    }
}

impl AdmmSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("admm: max_iterations must be at least 1".into()));
        }
        if !(self.rho_x >= 0.0) || !(self.rho_u >= 0.0) {
            return Err(Error::Config("admm: rho_x and rho_u must be >= 0".into()));
        }
        if self.patience == 0 || !(self.pl_step_size > 0.0) {
            return Err(Error::Config("admm: patience and pl_step_size must be positive".into()));
        }
        Ok(())
    }
}

/// One optimal-control problem: initial state, policy goal input, and the
/// cost that encodes the goal.
#[derive(Debug, Clone)]
pub struct TrajectoryTask {
    pub x0: StateVector,
    pub goal: Vec<f64>,
    pub cost: QuadraticCost,
}

pub struct AdmmProblem<'a> {
    pub model: &'a dyn Dynamics,
    pub tasks: Vec<TrajectoryTask>,
    pub horizon: usize,
    pub ddp: DdpSettings,
}

impl AdmmProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Contract("ADMM needs at least one trajectory".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Contract("horizon must be positive".into()));
        }
        self.ddp.validate()
    }
}

/// Policy input for a state: `x` followed by the goal parameters.
pub fn policy_input(x: &StateVector, goal: &[f64]) -> Vec<f64> {
    x.iter().chain(goal).copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cloning loss on the PL copies after the policy update.
    pub q_bc: f64,
    /// `|X_TO - X_PL|` over all trajectories, before the dual update.
    pub primal_residual_x: f64,
    pub primal_residual_u: f64,
    pub ddp_failures: usize,
    /// Trajectories whose PL update was rejected.
    pub pl_rejections: usize,
    pub train_failure: bool,
}

#[derive(Debug, Clone)]
pub struct AdmmState {
    pub to: Vec<Trajectory>,
    pub pl: Vec<Trajectory>,
    /// `T + 1` entries per trajectory.
    pub lambda_x: Vec<Vec<StateVector>>,
    /// `T` entries per trajectory.
    pub lambda_u: Vec<Vec<ControlVector>>,
    pub rho_x: f64,
    pub rho_u: f64,
    /// Number of completed iterations.
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
}

impl AdmmState {
    pub fn new(problem: &AdmmProblem, settings: &AdmmSettings) -> Self {
        let nx = problem.model.state_dim();
        let nu = problem.model.control_dim();
        let n = problem.tasks.len();
        Self {
            to: Vec::new(),
            pl: Vec::new(),
            lambda_x: vec![vec![StateVector::zeros(nx); problem.horizon + 1]; n],
            lambda_u: vec![vec![ControlVector::zeros(nu); problem.horizon]; n],
            rho_x: settings.rho_x,
            rho_u: settings.rho_u,
            iteration: 0,
            history: Vec::new(),
        }
    }

    /// Per-step consensus terms for trajectory `i`; zero until PL copies
    /// exist and on the first iteration.
    pub fn residuals(&self, i: usize) -> Option<Vec<AdmmResidual>> {
        let pl = self.pl.get(i)?;
        if self.iteration == 0 {
            return None;
        }
        Some(
            (0..pl.horizon())
                .map(|t| AdmmResidual {
                    rho_x: self.rho_x,
                    rho_u: self.rho_u,
                    x_pl: pl.states[t].clone(),
                    u_pl: pl.controls[t].clone(),
                    lambda_x: self.lambda_x[i][t].clone(),
                    lambda_u: self.lambda_u[i][t].clone(),
                })
                .collect(),
        )
    }

    /// Cloning dataset built from the PL copies.
    pub fn pl_dataset(&self, problem: &AdmmProblem, normalize_by_steps: bool) -> BcData {
        let mut samples = Vec::new();
        for (traj, task) in self.pl.iter().zip(&problem.tasks) {
            for t in 0..traj.horizon() {
                samples.push(Sample {
                    z: policy_input(&traj.states[t], &task.goal),
                    u: traj.controls[t].iter().copied().collect(),
                });
            }
        }
        BcData {
            samples,
            n_trajectories: self.pl.len(),
            normalize_by_steps,
        }
    }

    /// `(|X_TO - X_PL|, |U_TO - U_PL|)` summed over all trajectories.
    pub fn primal_residuals(&self) -> (f64, f64) {
        let mut rx = 0.0;
        let mut ru = 0.0;
        for (a, b) in self.to.iter().zip(&self.pl) {
            rx += a.states.iter().zip(&b.states).map(|(p, q)| (p - q).norm_squared()).sum::<f64>();
            ru += a.controls.iter().zip(&b.controls).map(|(p, q)| (p - q).norm_squared()).sum::<f64>();
        }
        (rx.sqrt(), ru.sqrt())
    }
}

/// Solves every trajectory with DDP under the current consensus terms,
/// warm-started from the previous TO controls. Returns the number of
/// trajectories whose solve failed or stalled; those keep the better of
/// the previous and the new solution.
pub fn primal_to_update(state: &mut AdmmState, problem: &AdmmProblem) -> Result<usize> {
    let results: Vec<(Trajectory, bool)> = problem
        .tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| -> Result<(Trajectory, bool)> {
            let residuals = state.residuals(i);
            let prev = state.to.get(i);
            let warm = prev.map(|p| p.controls.as_slice());
            let res = residuals.as_deref();
            match solve_ddp(&task.x0, problem.model, &task.cost, res, &problem.ddp, problem.horizon, warm) {
                Ok(sol) => {
                    let failed = sol.status == DdpStatus::Stalled;
                    if failed {
                        if let Some(p) = prev {
                            if p.cost(&task.cost, res)? < sol.cost() {
                                return Ok((p.clone(), true));
                            }
                        }
                    }
                    Ok((sol.trajectory, failed))
                }
                Err(e) => match prev {
                    Some(p) => Ok((p.clone(), true)),
                    None => Err(Error::Training(format!("trajectory {i}: {e}"))),
                },
            }
        })
        .collect::<Result<_>>()?;
    let failures = results.iter().filter(|r| r.1).count();
    state.to = results.into_iter().map(|r| r.0).collect();
    if state.pl.is_empty() {
        state.pl = state.to.clone();
    }
    Ok(failures)
}

/// Warm-started policy training on the PL copies.
pub fn policy_update(
    state: &AdmmState,
    problem: &AdmmProblem,
    net: &Mlp,
    cfg: &TrainConfig,
    normalize_by_steps: bool,
) -> Result<TrainOutcome> {
    let data = state.pl_dataset(problem, normalize_by_steps);
    let cfg = TrainConfig {
        seed: iteration_seed(cfg.seed, state.iteration),
        ..cfg.clone()
    };
    train_policy(&data, net, &cfg)
}

fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    seed ^ (iteration as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Closed-form minimizer of `a|pi - u|^2 + (rho_u/2)|u - c|^2` with
/// `a = 1/normalizer` and `c = u_TO + lambda_u`.
pub fn pl_control(pi: &[f64], u_to: &ControlVector, lambda_u: &ControlVector, rho_u: f64, normalizer: f64) -> ControlVector {
    let a = 1.0 / normalizer;
    ControlVector::from_iterator(
        pi.len(),
        pi.iter()
            .enumerate()
            .map(|(k, p)| (2.0 * a * p + rho_u * (u_to[k] + lambda_u[k])) / (2.0 * a + rho_u)),
    )
}

/// Reduced per-point PL objective with `u` eliminated:
/// `w |pi(x) - c|^2 + (rho_x/2)|x_TO - x + lambda_x|^2`.
struct PointObjective<'a> {
    net: &'a Mlp,
    goal: &'a [f64],
    weight: f64,
    c: Vec<f64>,
    anchor: StateVector,
    rho_x: f64,
}

impl PointObjective<'_> {
    fn value(&self, x: &StateVector) -> Result<f64> {
        let y = self.net.forward(&policy_input(x, self.goal))?;
        let fit: f64 = y.iter().zip(&self.c).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(self.weight * fit + 0.5 * self.rho_x * (x - &self.anchor).norm_squared())
    }

    fn gradient(&self, x: &StateVector) -> Result<StateVector> {
        let z = policy_input(x, self.goal);
        let trace = self.net.trace(&z)?;
        let up: Vec<f64> = trace.output().iter().zip(&self.c).map(|(a, b)| 2.0 * self.weight * (a - b)).collect();
        let gz = self.net.backward(&trace, &up, None, 1.0);
        Ok(StateVector::from_iterator(x.len(), gz.into_iter().take(x.len())) + (x - &self.anchor) * self.rho_x)
    }
}

/// Gradient descent with backtracking from `x`. Never increases the
/// objective.
fn descend(obj: &PointObjective, mut x: StateVector, steps: usize, step_size: f64) -> Result<StateVector> {
    let mut f = obj.value(&x)?;
    for _ in 0..steps {
        let g = obj.gradient(&x)?;
        let g2 = g.norm_squared();
        if g2 == 0.0 {
            break;
        }
        let mut eta = step_size;
        let mut moved = false;
        for _ in 0..30 {
            let cand = &x - &g * eta;
            let fc = obj.value(&cand)?;
            if fc <= f - 1e-4 * eta * g2 {
                x = cand;
                f = fc;
                moved = true;
                break;
            }
            eta *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(x)
}

/// Full PL objective of one trajectory, used for the acceptance check.
fn pl_objective(
    net: &Mlp,
    goal: &[f64],
    pl: &Trajectory,
    to: &Trajectory,
    lx: &[StateVector],
    lu: &[ControlVector],
    rho_x: f64,
    rho_u: f64,
    normalizer: f64,
) -> Result<f64> {
    let mut v = 0.0;
    for t in 0..pl.horizon() {
        let y = net.forward(&policy_input(&pl.states[t], goal))?;
        v += y.iter().zip(pl.controls[t].iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / normalizer;
        v += 0.5 * rho_u * (&to.controls[t] - &pl.controls[t] + &lu[t]).norm_squared();
    }
    for t in 0..=pl.horizon() {
        v += 0.5 * rho_x * (&to.states[t] - &pl.states[t] + &lx[t]).norm_squared();
    }
    Ok(v)
}

/// Minimizes `Q_BC(X, U, W) + consensus terms` over the PL copies. Returns
/// the number of trajectories whose update was rejected.
pub fn primal_pl_update(
    state: &mut AdmmState,
    problem: &AdmmProblem,
    net: &Mlp,
    settings: &AdmmSettings,
) -> Result<usize> {
    if state.to.len() != problem.tasks.len() || state.pl.len() != state.to.len() {
        return Err(Error::Contract("PL update needs TO and PL copies for every trajectory".into()));
    }
    let normalizer = state.pl_dataset(problem, settings.normalize_by_steps).normalizer();
    let (rho_x, rho_u) = (state.rho_x, state.rho_u);
    let a = 1.0 / normalizer;
    let b = 0.5 * rho_u;
    let weight = if a + b > 0.0 { a * b / (a + b) } else { 0.0 };
    let updated: Vec<(Trajectory, bool)> = (0..problem.tasks.len())
        .into_par_iter()
        .map(|i| -> Result<(Trajectory, bool)> {
            let goal = &problem.tasks[i].goal;
            let (to, pl) = (&state.to[i], &state.pl[i]);
            let (lx, lu) = (&state.lambda_x[i], &state.lambda_u[i]);
            let horizon = to.horizon();
            let mut states = Vec::with_capacity(horizon + 1);
            let mut controls = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let anchor = &to.states[t] + &lx[t];
                let c: Vec<f64> = (&to.controls[t] + &lu[t]).iter().copied().collect();
                let x = if rho_x > 0.0 || weight > 0.0 {
                    let obj = PointObjective {
                        net,
                        goal,
                        weight,
                        c,
                        anchor,
                        rho_x,
                    };
                    descend(&obj, pl.states[t].clone(), settings.pl_steps, settings.pl_step_size)?
                } else {
                    pl.states[t].clone()
                };
                let pi = net.forward(&policy_input(&x, goal))?;
                controls.push(if rho_u > 0.0 {
                    pl_control(&pi, &to.controls[t], &lu[t], rho_u, normalizer)
                } else {
                    ControlVector::from_column_slice(&pi)
                });
                states.push(x);
            }
            // the final state only carries the proximal term
            states.push(if rho_x > 0.0 {
                &to.states[horizon] + &lx[horizon]
            } else {
                pl.states[horizon].clone()
            });
            let candidate = Trajectory { states, controls };
            let before = pl_objective(net, goal, pl, to, lx, lu, rho_x, rho_u, normalizer)?;
            let after = pl_objective(net, goal, &candidate, to, lx, lu, rho_x, rho_u, normalizer)?;
            if after.is_finite() && after <= before + 1e-12 * (1.0 + before.abs()) {
                Ok((candidate, false))
            } else {
                Ok((pl.clone(), true))
            }
        })
        .collect::<Result<_>>()?;
    let rejected = updated.iter().filter(|u| u.1).count();
    state.pl = updated.into_iter().map(|u| u.0).collect();
    Ok(rejected)
}

/// `lambda += TO - PL`.
pub fn dual_update(state: &mut AdmmState) -> Result<()> {
    if state.to.len() != state.pl.len() {
        return Err(Error::Contract("dual update needs matching TO and PL copies".into()));
    }
    for i in 0..state.to.len() {
        for (t, l) in state.lambda_x[i].iter_mut().enumerate() {
            *l += &state.to[i].states[t] - &state.pl[i].states[t];
        }
        for (t, l) in state.lambda_u[i].iter_mut().enumerate() {
            *l += &state.to[i].controls[t] - &state.pl[i].controls[t];
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    /// Policy with the lowest recorded cloning loss.
    pub net: Mlp,
    pub best_iteration: usize,
    pub state: AdmmState,
    /// Training history of every policy update, in order.
    pub train_histories: Vec<TrainOutcome>,
}

/// Runs ADMM until `max_iterations` or until the cloning loss has not
/// improved for `patience` iterations. `on_iteration` sees every record and
/// the policy produced in that iteration.
pub fn run_admm(
    problem: &AdmmProblem,
    init: &Mlp,
    train: &TrainConfig,
    settings: &AdmmSettings,
    mut on_iteration: impl FnMut(&IterationRecord, &Mlp) -> Result<()>,
) -> Result<AdmmOutcome> {
    settings.validate()?;
    problem.validate()?;
    let mut state = AdmmState::new(problem, settings);
    let mut net = init.clone();
    let mut best = (f64::INFINITY, init.clone(), 0usize);
    let mut since_best = 0;
    let mut train_histories = Vec::new();
    for iteration in 1..=settings.max_iterations {
        let ddp_failures = primal_to_update(&mut state, problem)?;
        let outcome = policy_update(&state, problem, &net, train, settings.normalize_by_steps)?;
        let train_failure = outcome.failure.is_some();
        net = outcome.net.clone();
        let q_bc = bc_loss(&state.pl_dataset(problem, settings.normalize_by_steps), &net)?;
        train_histories.push(outcome);
        let pl_rejections = primal_pl_update(&mut state, problem, &net, settings)?;
        let (rx, ru) = state.primal_residuals();
        dual_update(&mut state)?;
        state.iteration = iteration;
        let record = IterationRecord {
            iteration,
            q_bc,
            primal_residual_x: rx,
            primal_residual_u: ru,
            ddp_failures,
            pl_rejections,
            train_failure,
        };
        on_iteration(&record, &net)?;
        state.history.push(record);
        if train_failure {
            return Err(Error::Training(format!(
                "policy training diverged in ADMM iteration {iteration}"
            )));
        }
        if q_bc < best.0 {
            best = (q_bc, net.clone(), iteration);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= settings.patience {
                break;
            }
        }
    }
    Ok(AdmmOutcome {
        net: best.1,
        best_iteration: best.2,
        state,
        train_histories,
    })
}
