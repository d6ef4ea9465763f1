//! End-to-end experiment steps behind the CLI: sampling initial conditions,
//! ADMM training, evaluation under disturbances, sweeps and reports.
//!
//! Output layout of a run directory:
//!
//! | file | content |
//! |---|---|
//! | `iter_NNN.ckpt` | policy after ADMM iteration `NNN` |
//! | `policy.ckpt` | policy with the lowest cloning loss |
//! | `dataset.bin` | final trajectory-optimizer trajectories |
//! | `history.csv` | one row per ADMM iteration |
//! | `epochs.csv` | one row per training epoch |
//! | `rollouts.csv`, `percentiles.csv`, `summary.csv`, `lipschitz.csv` | evaluation |

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::admm::{policy_input, run_admm, AdmmOutcome, AdmmProblem, TrajectoryTask};
use crate::ddp::solve_ddp;
use crate::envs::{StateVector, System};
use crate::error::{Error, Result};
use crate::eval::{cost_percentile, empirical_lipschitz, rollout_batch, DisturbanceKind, DisturbanceSpec, RolloutCase};
use crate::io::{
    csv_f64, derive_seed, read_initial_conditions, sample_initial_conditions, write_initial_conditions, Checkpoint,
    CsvTable, Dataset, InitialCondition, RunConfig,
};
use crate::policy::Mlp;

/// Perturbation bounds of the epsilon sweep.
pub const EPSILON_SWEEP: [f64; 5] = [0.0, 0.005, 0.01, 0.025, 0.05];
/// Disturbance magnitudes of the default zeta sweep.
pub const ZETA_SWEEP: [f64; 3] = [0.01, 0.025, 0.05];

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Samples the training initial conditions and writes them to `out`.
pub fn gen_init(cfg: &RunConfig, out: &Path) -> Result<Vec<InitialCondition>> {
    let ics = sample_initial_conditions(cfg, "train", cfg.dataset.n_trajectories)?;
    write_initial_conditions(out, cfg, &ics)?;
    Ok(ics)
}

/// Held-out initial conditions used by evaluation.
pub fn eval_conditions(cfg: &RunConfig) -> Result<Vec<InitialCondition>> {
    sample_initial_conditions(cfg, "eval", cfg.eval.rollouts)
}

pub fn tasks(cfg: &RunConfig, system: &System, ics: &[InitialCondition]) -> Result<Vec<TrajectoryTask>> {
    ics.iter()
        .map(|ic| {
            Ok(TrajectoryTask {
                x0: ic.x0.clone(),
                goal: ic.goal.clone(),
                cost: cfg.cost.for_goal(system, &ic.goal)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub outcome: AdmmOutcome,
    pub history_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub dataset_path: PathBuf,
}

fn history_table(hash: &str) -> CsvTable {
    CsvTable::new(
        hash,
        &[
            "iteration",
            "q_bc",
            "primal_residual_x",
            "primal_residual_u",
            "ddp_failures",
            "pl_rejections",
            "train_failure",
        ],
    )
}

/// Runs ADMM on the given initial conditions, checkpointing every
/// iteration into `out_dir`.
pub fn train(cfg: &RunConfig, ics: &[InitialCondition], out_dir: &Path) -> Result<TrainSummary> {
    create_dir(out_dir)?;
    let system = cfg.system()?;
    let hash = cfg.config_hash();
    let problem = AdmmProblem {
        model: system.dynamics(),
        tasks: tasks(cfg, &system, ics)?,
        horizon: cfg.dataset.horizon,
        ddp: cfg.ddp.clone(),
    };
    let mut train_cfg = cfg.training.clone();
    train_cfg.seed = derive_seed(cfg.seed, "training");
    let init = cfg.initial_policy()?;
    let history_path = out_dir.join("history.csv");
    let mut history = history_table(&hash);
    let result = run_admm(&problem, &init, &train_cfg, &cfg.admm, |rec, net| {
        Checkpoint::from_net(net, &hash, rec.iteration, rec.q_bc).write(out_dir.join(format!("iter_{:03}.ckpt", rec.iteration)))?;
        history.push(vec![
            rec.iteration.to_string(),
            csv_f64(rec.q_bc),
            csv_f64(rec.primal_residual_x),
            csv_f64(rec.primal_residual_u),
            rec.ddp_failures.to_string(),
            rec.pl_rejections.to_string(),
            rec.train_failure.to_string(),
        ]);
        history.write(&history_path)
    });
    let outcome = result?;

    let mut epochs = CsvTable::new(&hash, &["iteration", "epoch", "q_bc", "regularizer", "grad_norm"]);
    for (it, run) in outcome.train_histories.iter().enumerate() {
        for e in &run.history {
            epochs.push(vec![
                (it + 1).to_string(),
                e.epoch.to_string(),
                csv_f64(e.q_bc),
                csv_f64(e.regularizer),
                csv_f64(e.grad_norm),
            ]);
        }
    }
    epochs.write(out_dir.join("epochs.csv"))?;

    let best_q = outcome
        .state
        .history
        .iter()
        .find(|r| r.iteration == outcome.best_iteration)
        .map_or(f64::NAN, |r| r.q_bc);
    let checkpoint_path = out_dir.join("policy.ckpt");
    Checkpoint::from_net(&outcome.net, &hash, outcome.best_iteration, best_q).write(&checkpoint_path)?;
    let dataset_path = out_dir.join("dataset.bin");
    Dataset {
        config_hash: hash.clone(),
        model_hash: cfg.model_hash(),
        goals: ics.iter().map(|ic| ic.goal.clone()).collect(),
        trajectories: outcome.state.to.clone(),
    }
    .write(&dataset_path)?;
    Ok(TrainSummary {
        outcome,
        history_path,
        checkpoint_path,
        dataset_path,
    })
}

/// Reads the initial-condition file and trains.
pub fn train_from_file(cfg: &RunConfig, init_path: &Path, out_dir: &Path) -> Result<TrainSummary> {
    let ics = read_initial_conditions(init_path, cfg)?;
    if ics.len() != cfg.dataset.n_trajectories {
        return Err(Error::Incompatible(format!(
            "{}: holds {} initial conditions, config asks for {}",
            init_path.display(),
            ics.len(),
            cfg.dataset.n_trajectories
        )));
    }
    train(cfg, &ics, out_dir)
}

/// Loads a checkpoint and checks it against the config.
pub fn load_policy(cfg: &RunConfig, path: &Path) -> Result<Mlp> {
    let ck = Checkpoint::read(path)?;
    if ck.config_hash != cfg.config_hash() {
        return Err(Error::Incompatible(format!(
            "{}: trained under config {}, current config is {}",
            path.display(),
            ck.config_hash,
            cfg.config_hash()
        )));
    }
    let dims = cfg.policy.dims(&cfg.system()?);
    if ck.dims != dims {
        return Err(Error::Incompatible(format!(
            "{}: policy dims {:?} do not match config dims {:?}",
            path.display(),
            ck.dims,
            dims
        )));
    }
    ck.to_net()
}

pub fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let ds = Dataset::read(path)?;
    if ds.config_hash != cfg.config_hash() || ds.model_hash != cfg.model_hash() {
        return Err(Error::Incompatible(format!("{}: produced under a different config", path.display())));
    }
    Ok(ds)
}

/// Per-disturbance evaluation results.
#[derive(Debug, Clone)]
pub struct DisturbanceSummary {
    pub spec: DisturbanceSpec,
    pub costs: Vec<f64>,
    pub task_errors: Vec<f64>,
    /// Rollouts ending within the success error and within the cap of
    /// their own baseline cost.
    pub successes: usize,
    pub diverged: usize,
}

impl DisturbanceSummary {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.costs.len() as f64
    }

    pub fn mean_task_error(&self) -> f64 {
        self.task_errors.iter().sum::<f64>() / self.task_errors.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub baseline_costs: Vec<f64>,
    pub disturbances: Vec<DisturbanceSummary>,
    pub lipschitz: Vec<f64>,
}

impl EvalSummary {
    pub fn median_lipschitz(&self) -> f64 {
        median(&self.lipschitz)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trajectory-optimizer costs of the evaluation cases on the nominal model.
pub fn baseline_costs(cfg: &RunConfig, system: &System, cases: &[RolloutCase]) -> Result<Vec<f64>> {
    let horizon = cfg.eval_horizon();
    cases
        .par_iter()
        .map(|c| Ok(solve_ddp(&c.x0, system.dynamics(), &c.cost, None, &cfg.ddp, horizon, None)?.cost()))
        .collect()
}

/// `count` states spread evenly over the concatenated trajectories.
pub fn spread_states(trajectories: &[Vec<StateVector>], count: usize) -> Vec<(usize, StateVector)> {
    let flat: Vec<(usize, &StateVector)> = trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| t.iter().map(move |x| (i, x)))
        .collect();
    if flat.is_empty() || count == 0 {
        return Vec::new();
    }
    let n = count.min(flat.len());
    (0..n).map(|k| flat[k * flat.len() / n]).map(|(i, x)| (i, x.clone())).collect()
}

/// Median-ready local Lipschitz estimates of `net` at `points`.
pub fn lipschitz_at(cfg: &RunConfig, net: &Mlp, points: &[(Vec<f64>, StateVector)]) -> Result<Vec<f64>> {
    let seed = derive_seed(cfg.seed, "lipschitz");
    let dims = cfg.training.perturbation.perturb_dims;
    points
        .par_iter()
        .enumerate()
        .map(|(k, (goal, x))| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::eval::rollout_seed(seed, k));
            let z = policy_input(x, goal);
            Ok(empirical_lipschitz(net, &z, cfg.eval.lipschitz_epsilon, cfg.eval.lipschitz_samples, dims, &mut rng)?.estimate)
        })
        .collect()
}

/// Rolls the policy out on the held-out cases for every configured
/// disturbance and writes the evaluation CSVs into `out_dir`. Lipschitz
/// points come from `dataset` when given, otherwise from the undisturbed
/// rollouts.
pub fn evaluate(cfg: &RunConfig, net: &Mlp, dataset: Option<&Dataset>, out_dir: &Path) -> Result<EvalSummary> {
    create_dir(out_dir)?;
    let system = cfg.system()?;
    let hash = cfg.config_hash();
    let horizon = cfg.eval_horizon();
    let cases: Vec<RolloutCase> = eval_conditions(cfg)?
        .into_iter()
        .map(|ic| {
            let cost = cfg.cost.for_goal(&system, &ic.goal)?;
            Ok(RolloutCase {
                x0: ic.x0,
                goal: ic.goal,
                cost,
            })
        })
        .collect::<Result<_>>()?;
    let baseline = baseline_costs(cfg, &system, &cases)?;
    let baseline_max = baseline.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cap = cfg.eval.cap_multiplier;

    let mut rollouts = CsvTable::new(
        &hash,
        &["disturbance", "index", "cost", "baseline_cost", "task_error", "diverged", "success"],
    );
    let mut percentiles = CsvTable::new(&hash, &["disturbance", "percentile", "cost", "capped"]);
    let mut summary_csv = CsvTable::new(
        &hash,
        &[
            "disturbance",
            "rollouts",
            "mean_task_error",
            "median_task_error",
            "success_rate",
            "diverged",
            "mean_cost",
        ],
    );
    let mut disturbances = Vec::new();
    let mut nominal_states = None;
    for spec in &cfg.eval.disturbances {
        let label = spec.label();
        let results = rollout_batch(net, &system, &cases, horizon, spec, derive_seed(cfg.seed, &format!("eval/{label}")))?;
        let costs: Vec<f64> = results.iter().map(|r| r.effective_cost()).collect();
        let task_errors: Vec<f64> = results.iter().map(|r| r.task_error).collect();
        let mut successes = 0;
        for (i, r) in results.iter().enumerate() {
            let ok = !r.diverged && r.task_error < cfg.eval.success_error && r.cost <= cap * baseline[i];
            successes += ok as usize;
            rollouts.push(vec![
                label.clone(),
                i.to_string(),
                csv_f64(costs[i]),
                csv_f64(baseline[i]),
                csv_f64(r.task_error),
                r.diverged.to_string(),
                ok.to_string(),
            ]);
        }
        let curve = cost_percentile(&costs, Some(baseline_max), cap)?;
        for ((p, v), c) in curve.percentiles.iter().zip(&curve.values).zip(&curve.capped) {
            percentiles.push(vec![label.clone(), csv_f64(*p), csv_f64(*v), c.to_string()]);
        }
        let diverged = results.iter().filter(|r| r.diverged).count();
        let s = DisturbanceSummary {
            spec: spec.clone(),
            costs,
            task_errors,
            successes,
            diverged,
        };
        summary_csv.push(vec![
            label,
            results.len().to_string(),
            csv_f64(s.mean_task_error()),
            csv_f64(median(&s.task_errors)),
            csv_f64(s.success_rate()),
            diverged.to_string(),
            csv_f64(s.costs.iter().sum::<f64>() / s.costs.len() as f64),
        ]);
        if spec.kind == DisturbanceKind::None && nominal_states.is_none() {
            nominal_states = Some(results.into_iter().map(|r| r.states).collect::<Vec<_>>());
        }
        disturbances.push(s);
    }

    let points: Vec<(Vec<f64>, StateVector)> = match dataset {
        Some(ds) => {
            let trajs: Vec<Vec<StateVector>> = ds.trajectories.iter().map(|t| t.states.clone()).collect();
            spread_states(&trajs, cfg.eval.lipschitz_points)
                .into_iter()
                .map(|(i, x)| (ds.goals[i].clone(), x))
                .collect()
        }
        None => {
            let trajs = match nominal_states {
                Some(s) => s,
                None => rollout_batch(net, &system, &cases, horizon, &DisturbanceSpec::none(), 0)?
                    .into_iter()
                    .map(|r| r.states)
                    .collect(),
            };
            spread_states(&trajs, cfg.eval.lipschitz_points)
                .into_iter()
                .map(|(i, x)| (cases[i].goal.clone(), x))
                .collect()
        }
    };
    let lipschitz = lipschitz_at(cfg, net, &points)?;
    let mut lip_csv = CsvTable::new(&hash, &["point", "estimate"]);
    for (k, v) in lipschitz.iter().enumerate() {
        lip_csv.push(vec![k.to_string(), csv_f64(*v)]);
    }

    rollouts.write(out_dir.join("rollouts.csv"))?;
    percentiles.write(out_dir.join("percentiles.csv"))?;
    summary_csv.write(out_dir.join("summary.csv"))?;
    lip_csv.write(out_dir.join("lipschitz.csv"))?;
    Ok(EvalSummary {
        baseline_costs: baseline,
        disturbances,
        lipschitz,
    })
}

/// One disturbance of `kind` per magnitude in `zetas`.
pub fn zeta_sweep(kind: DisturbanceKind, zetas: &[f64]) -> Vec<DisturbanceSpec> {
    zetas
        .iter()
        .map(|&z| match kind {
            DisturbanceKind::None => DisturbanceSpec::none(),
            DisturbanceKind::Sensor => DisturbanceSpec::sensor(z),
            DisturbanceKind::Transition => DisturbanceSpec::transition(z),
            DisturbanceKind::ModelMismatch => DisturbanceSpec::mismatch(z),
        })
        .collect()
}

/// Retrains and evaluates for every perturbation bound, one subdirectory
/// per bound, and writes `epsilon_sweep.csv` into `out_dir`.
pub fn epsilon_sweep(cfg: &RunConfig, ics: &[InitialCondition], epsilons: &[f64], out_dir: &Path) -> Result<CsvTable> {
    create_dir(out_dir)?;
    let mut table = CsvTable::new(
        &cfg.config_hash(),
        &[
            "epsilon",
            "config_hash",
            "best_q_bc",
            "disturbance",
            "mean_task_error",
            "success_rate",
            "median_lipschitz",
        ],
    );
    for &eps in epsilons {
        let mut run = cfg.clone();
        run.training.perturbation.epsilon = eps;
        run.validate()?;
        let dir = out_dir.join(format!("eps_{eps}"));
        let trained = train(&run, ics, &dir)?;
        let ds = load_dataset(&run, &trained.dataset_path)?;
        let summary = evaluate(&run, &trained.outcome.net, Some(&ds), &dir)?;
        let best_q = trained
            .outcome
            .state
            .history
            .iter()
            .map(|r| r.q_bc)
            .fold(f64::INFINITY, f64::min);
        for d in &summary.disturbances {
            table.push(vec![
                csv_f64(eps),
                run.config_hash(),
                csv_f64(best_q),
                d.spec.label(),
                csv_f64(d.mean_task_error()),
                csv_f64(d.success_rate()),
                csv_f64(summary.median_lipschitz()),
            ]);
        }
    }
    table.write(out_dir.join("epsilon_sweep.csv"))?;
    Ok(table)
}

/// Merges every `percentiles.csv` under `dir` (itself and one level of
/// subdirectories) into a wide table with one cost column per run and
/// disturbance.
pub fn report(dir: &Path) -> Result<CsvTable> {
    let mut sources = Vec::new();
    let mut visit = |d: &Path, name: String| {
        let p = d.join("percentiles.csv");
        if p.is_file() {
            sources.push((name, p));
        }
    };
    visit(dir, ".".into());
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        let name = d.file_name().unwrap().to_string_lossy().into_owned();
        visit(&d, name);
    }
    if sources.is_empty() {
        return Err(Error::Incompatible(format!("{}: no percentiles.csv found", dir.display())));
    }

    let mut hashes: Vec<String> = Vec::new();
    let mut columns = vec!["percentile".to_string()];
    let mut series: Vec<Vec<String>> = Vec::new();
    let mut percentiles: Option<Vec<String>> = None;
    for (name, path) in &sources {
        let t = CsvTable::read(path)?;
        if !hashes.contains(&t.config_hash) {
            hashes.push(t.config_hash.clone());
        }
        let (Some(dc), Some(pc), Some(cc)) = (t.column("disturbance"), t.column("percentile"), t.column("cost")) else {
            return Err(Error::Incompatible(format!("{}: not a percentile table", path.display())));
        };
        let mut labels: Vec<&str> = Vec::new();
        for r in &t.rows {
            if !labels.contains(&r[dc].as_str()) {
                labels.push(&r[dc]);
            }
        }
        for label in labels {
            let rows: Vec<&Vec<String>> = t.rows.iter().filter(|r| r[dc] == label).collect();
            let ps: Vec<String> = rows.iter().map(|r| r[pc].clone()).collect();
            match &percentiles {
                None => percentiles = Some(ps),
                Some(existing) if *existing != ps => {
                    return Err(Error::Incompatible(format!("{}: percentile grid differs", path.display())));
                }
                _ => {}
            }
            columns.push(if name == "." { label.to_string() } else { format!("{name}/{label}") });
            series.push(rows.iter().map(|r| r[cc].clone()).collect());
        }
    }
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut out = CsvTable::new(&hashes.join("+"), &cols);
    for (k, p) in percentiles.unwrap_or_default().into_iter().enumerate() {
        let mut row = vec![p];
        row.extend(series.iter().map(|s| s[k].clone()));
        out.push(row);
    }
    out.write(dir.join("report.csv"))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"
seed = 11

[model]
kind = "planar_arm"

[cost]
q = [1.0, 1.0, 0.1, 0.1]
r = [0.01, 0.01]
q_final = [100.0, 100.0, 1.0, 1.0]

[dataset]
n_trajectories = 3
horizon = 15
x0_low = [-0.2, -0.2, 0.0, 0.0]
x0_high = [0.2, 0.2, 0.0, 0.0]
goal_low = [0.3, 0.3]
goal_high = [0.6, 0.6]

[policy]
hidden = [8]

[admm]
max_iterations = 2

[training]
epochs = 3
batch_size = 16
regularizer = "sar"

[eval]
rollouts = 3
lipschitz_points = 5
lipschitz_samples = 4
disturbances = [{ kind = "none" }, { kind = "sensor", zeta = 0.01 }]
"#;

    #[test]
    fn train_then_evaluate_writes_tagged_outputs() {
        let cfg = RunConfig::from_toml_str(CONFIG).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let init = dir.path().join("init.txt");
        gen_init(&cfg, &init).unwrap();
        let run = dir.path().join("run");
        let t = train_from_file(&cfg, &init, &run).unwrap();
        let net = load_policy(&cfg, &t.checkpoint_path).unwrap();
        assert_eq!(net, t.outcome.net);
        assert!(run.join("iter_001.ckpt").is_file());
        let hist = CsvTable::read(&t.history_path).unwrap();
        assert_eq!(hist.rows.len(), t.outcome.state.history.len());

        let ds = load_dataset(&cfg, &t.dataset_path).unwrap();
        let s = evaluate(&cfg, &net, Some(&ds), &run).unwrap();
        assert_eq!(s.disturbances.len(), 2);
        assert_eq!(s.lipschitz.len(), 5);
        for f in ["rollouts.csv", "percentiles.csv", "summary.csv", "lipschitz.csv", "epochs.csv"] {
            assert_eq!(CsvTable::read(run.join(f)).unwrap().config_hash, cfg.config_hash(), "{f}");
        }
        let rep = report(dir.path()).unwrap();
        assert_eq!(rep.rows.len(), 100);
        assert_eq!(rep.columns, vec!["percentile", "run/none", "run/sensor_0.01"]);

        let mut other = cfg.clone();
        other.training.epochs = 4;
        assert!(matches!(load_policy(&other, &t.checkpoint_path), Err(Error::Incompatible(_))));
        assert!(matches!(load_dataset(&other, &t.dataset_path), Err(Error::Incompatible(_))));
    }

    #[test]
    fn single_rollout_gives_single_row() {
        let mut cfg = RunConfig::from_toml_str(CONFIG).unwrap();
        cfg.eval.rollouts = 1;
        cfg.eval.disturbances = vec![DisturbanceSpec::none()];
        let net = cfg.initial_policy().unwrap();
        let dir = tempfile::tempdir().unwrap();
        evaluate(&cfg, &net, None, dir.path()).unwrap();
        assert_eq!(CsvTable::read(dir.path().join("rollouts.csv")).unwrap().rows.len(), 1);
        assert_eq!(CsvTable::read(dir.path().join("summary.csv")).unwrap().rows.len(), 1);
    }

    #[test]
    fn zeta_sweep_gives_one_curve_per_magnitude() {
        let specs = zeta_sweep(DisturbanceKind::Sensor, &ZETA_SWEEP);
        assert_eq!(specs.len(), 3);
        assert!(specs.iter().zip(ZETA_SWEEP).all(|(s, z)| s.zeta == z && s.kind == DisturbanceKind::Sensor));
    }

    #[test]
    fn spread_states_is_even() {
        let trajs = vec![(0..10).map(|i| StateVector::from_element(1, i as f64)).collect::<Vec<_>>()];
        let pts = spread_states(&trajs, 5);
        let v: Vec<f64> = pts.iter().map(|(_, x)| x[0]).collect();
        assert_eq!(v, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        assert_eq!(spread_states(&trajs, 50).len(), 10);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }
}
