//! Run configuration and on-disk formats.
//!
//! * Config: one TOML file, unknown keys rejected.
//! * Initial conditions: text, one `x0 ++ goal` row per line after a
//!   `# trajreg-init v1` header block.
//! * Dataset and checkpoint: a single ASCII header line
//!   (`trajreg-dataset v1 key=value ...` / `trajreg-checkpoint v1 ...`)
//!   followed by little-endian f64 values.
//! * CSV: first line `# config_hash=<hex>`, then a header row.
//!
//! Every write goes to a temporary file in the target directory and is
//! renamed into place.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::admm::AdmmSettings;
use crate::advreg::TrainConfig;
use crate::costs::QuadraticCost;
use crate::ddp::{DdpSettings, Trajectory};
use crate::envs::{CartPole, CartPoleParams, ControlVector, PlanarArm, PlanarArmParams, StateVector, System};
use crate::error::{Error, Result};
use crate::eval::DisturbanceSpec;
use crate::policy::{param_count, Activation, Mlp};

pub const INIT_FORMAT: &str = "trajreg-init v1";
pub const DATASET_FORMAT: &str = "trajreg-dataset v1";
pub const CHECKPOINT_FORMAT: &str = "trajreg-checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    CartPole,
    PlanarArm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: SystemKind,
    #[serde(default)]
    pub cart_pole: CartPoleParams,
    #[serde(default)]
    pub planar_arm: PlanarArmParams,
}

impl ModelConfig {
    pub fn system(&self) -> Result<System> {
        Ok(match self.kind {
            SystemKind::CartPole => System::CartPole(CartPole::new(self.cart_pole.clone())?),
            SystemKind::PlanarArm => System::PlanarArm(PlanarArm::new(self.planar_arm.clone())?),
        })
    }
}

/// Diagonal weights of the quadratic tracking cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub q_final: Vec<f64>,
}

impl CostConfig {
    pub fn for_goal(&self, system: &System, goal: &[f64]) -> Result<QuadraticCost> {
        QuadraticCost::diagonal(&self.q, &self.r, &self.q_final, system.goal_state(goal)?)
    }
}

/// Uniform box sampler for initial states and goals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_trajectories: usize,
    pub horizon: usize,
    pub x0_low: Vec<f64>,
    pub x0_high: Vec<f64>,
    pub goal_low: Vec<f64>,
    pub goal_high: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub activation: String,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: "tanh".into(),
        }
    }
}

impl PolicyConfig {
    pub fn dims(&self, system: &System) -> Vec<usize> {
        let mut dims = vec![system.state_dim() + system.goal_dim()];
        dims.extend(&self.hidden);
        dims.push(system.control_dim());
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out initial conditions per disturbance.
    pub rollouts: usize,
    /// Rollout length; the dataset horizon when unset.
    pub horizon: Option<usize>,
    pub cap_multiplier: f64,
    pub disturbances: Vec<DisturbanceSpec>,
    pub lipschitz_epsilon: f64,
    pub lipschitz_samples: usize,
    /// Number of trajectory states at which the Lipschitz estimate is taken.
    pub lipschitz_points: usize,
    /// Success threshold on the task error.
    pub success_error: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollouts: 100,
            horizon: None,
            cap_multiplier: 2.0,
            disturbances: vec![DisturbanceSpec::none()],
            lipschitz_epsilon: 0.01,
            lipschitz_samples: 32,
            lipschitz_points: 100,
            success_error: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub cost: CostConfig,
    #[serde(default)]
    pub ddp: DdpSettings,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub admm: AdmmSettings,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// The sections that determine training artifacts.
#[derive(Serialize)]
struct Hashed<'a> {
    seed: u64,
    model: &'a ModelConfig,
    cost: &'a CostConfig,
    ddp: &'a DdpSettings,
    dataset: &'a DatasetConfig,
    policy: &'a PolicyConfig,
    admm: &'a AdmmSettings,
    training: &'a TrainConfig,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Seed of the named random stream.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn system(&self) -> Result<System> {
        self.model.system()
    }

    pub fn validate(&self) -> Result<()> {
        let system = self.system().map_err(|e| Error::Config(format!("model: {e}")))?;
        let (nx, nu, ng) = (system.state_dim(), system.control_dim(), system.goal_dim());
        let bad = |m: String| Err(Error::Config(m));
        if self.cost.q.len() != nx || self.cost.q_final.len() != nx || self.cost.r.len() != nu {
            return bad(format!("cost: q and q_final need {nx} weights, r needs {nu}"));
        }
        if self.cost.q.iter().chain(&self.cost.q_final).any(|w| !(*w >= 0.0)) || self.cost.r.iter().any(|w| !(*w > 0.0)) {
            return bad("cost: q and q_final must be >= 0 and r > 0".into());
        }
        let d = &self.dataset;
        if d.n_trajectories == 0 {
            return bad("dataset.n_trajectories must be at least 1".into());
        }
        if d.horizon == 0 {
            return bad("dataset.horizon must be at least 1".into());
        }
        for (name, lo, hi, n) in [("x0", &d.x0_low, &d.x0_high, nx), ("goal", &d.goal_low, &d.goal_high, ng)] {
            if lo.len() != n || hi.len() != n {
                return bad(format!("dataset.{name}_low/{name}_high need {n} entries"));
            }
            if lo.iter().zip(hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
                return bad(format!("dataset.{name}_low must not exceed dataset.{name}_high"));
            }
        }
        if self.policy.hidden.iter().any(|h| *h == 0) {
            return bad("policy.hidden sizes must be positive".into());
        }
        Activation::from_tag(&self.policy.activation).map_err(|e| Error::Config(format!("policy.activation: {e}")))?;
        self.ddp.validate().map_err(|e| Error::Config(format!("ddp: {e}")))?;
        self.admm.validate()?;
        self.training.validate()?;
        if let Some(n) = self.training.perturbation.perturb_dims {
            if n > nx + ng {
                return bad("training.perturbation.perturb_dims exceeds the policy input size".into());
            }
        }
        let e = &self.eval;
        if e.rollouts == 0 || e.horizon == Some(0) || !(e.cap_multiplier > 0.0) {
            return bad("eval: rollouts, horizon and cap_multiplier must be positive".into());
        }
        if !(e.lipschitz_epsilon > 0.0) || e.lipschitz_samples == 0 {
            return bad("eval: lipschitz_epsilon and lipschitz_samples must be positive".into());
        }
        for d in &e.disturbances {
            d.validate().map_err(|err| Error::Config(format!("eval.disturbances: {err}")))?;
        }
        Ok(())
    }

    /// Hash of everything that affects training outputs.
    pub fn config_hash(&self) -> String {
        let h = Hashed {
            seed: self.seed,
            model: &self.model,
            cost: &self.cost,
            ddp: &self.ddp,
            dataset: &self.dataset,
            policy: &self.policy,
            admm: &self.admm,
            training: &self.training,
        };
        sha256_hex(toml::to_string(&h).expect("config serializes").as_bytes())
    }

    /// Hash of the sections that determine sampled initial conditions.
    pub fn init_hash(&self) -> String {
        #[derive(Serialize)]
        struct Init<'a> {
            seed: u64,
            model: &'a ModelConfig,
            dataset: &'a DatasetConfig,
        }
        let h = Init {
            seed: self.seed,
            model: &self.model,
            dataset: &self.dataset,
        };
        sha256_hex(toml::to_string(&h).expect("config serializes").as_bytes())
    }

    pub fn model_hash(&self) -> String {
        sha256_hex(toml::to_string(&self.model).expect("config serializes").as_bytes())
    }

    pub fn eval_horizon(&self) -> usize {
        self.eval.horizon.unwrap_or(self.dataset.horizon)
    }

    pub fn initial_policy(&self) -> Result<Mlp> {
        let system = self.system()?;
        let act = Activation::from_tag(&self.policy.activation)?;
        Mlp::init(&self.policy.dims(&system), act, derive_seed(self.seed, "policy-init"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    pub x0: StateVector,
    pub goal: Vec<f64>,
}

/// `count` initial conditions drawn uniformly from the dataset box using
/// the named seed stream.
pub fn sample_initial_conditions(cfg: &RunConfig, stream: &str, count: usize) -> Result<Vec<InitialCondition>> {
    if count == 0 {
        return Err(Error::Config("at least one initial condition is required".into()));
    }
    let d = &cfg.dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream));
    let mut draw = |lo: &[f64], hi: &[f64]| -> Vec<f64> { lo.iter().zip(hi).map(|(a, b)| rng.random_range(*a..=*b)).collect() };
    Ok((0..count)
        .map(|_| {
            let x0 = StateVector::from_vec(draw(&d.x0_low, &d.x0_high));
            let goal = draw(&d.goal_low, &d.goal_high);
            InitialCondition { x0, goal }
        })
        .collect())
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Shortest decimal that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Incompatible(format!("{what}: cannot parse `{s}` as a number")))
}

pub fn write_initial_conditions(path: impl AsRef<Path>, cfg: &RunConfig, ics: &[InitialCondition]) -> Result<()> {
    let system = cfg.system()?;
    let mut out = String::new();
    let _ = writeln!(out, "# {INIT_FORMAT}");
    let _ = writeln!(out, "# config_hash={} init_hash={}", cfg.config_hash(), cfg.init_hash());
    let _ = writeln!(
        out,
        "# system={} state_dim={} goal_dim={} count={}",
        system.name(),
        system.state_dim(),
        system.goal_dim(),
        ics.len()
    );
    let _ = writeln!(out, "# columns: x0[0..state_dim] goal[0..goal_dim]");
    for ic in ics {
        let row: Vec<String> = ic.x0.iter().chain(&ic.goal).map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    write_atomic(path, out.as_bytes())
}

fn header_fields(line: &str) -> BTreeMap<String, String> {
    line.split_whitespace()
        .filter_map(|t| t.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn field<'a>(fields: &'a BTreeMap<String, String>, key: &str, what: &str) -> Result<&'a str> {
    fields
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Incompatible(format!("{what}: header lacks `{key}`")))
}

fn field_usize(fields: &BTreeMap<String, String>, key: &str, what: &str) -> Result<usize> {
    field(fields, key, what)?
        .parse()
        .map_err(|_| Error::Incompatible(format!("{what}: bad `{key}`")))
}

/// Reads an initial-condition file, refusing files sampled under a
/// different seed, model or dataset box.
pub fn read_initial_conditions(path: impl AsRef<Path>, cfg: &RunConfig) -> Result<Vec<InitialCondition>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(&format!("# {INIT_FORMAT}")) {
        return Err(Error::Incompatible(format!("{what}: not a `{INIT_FORMAT}` file")));
    }
    let mut meta = BTreeMap::new();
    let mut ics = Vec::new();
    let system = cfg.system()?;
    let (nx, ng) = (system.state_dim(), system.goal_dim());
    for line in lines {
        if let Some(c) = line.strip_prefix('#') {
            meta.extend(header_fields(c));
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line.split_whitespace().map(|t| parse_f64(t, &what)).collect::<Result<_>>()?;
        if vals.len() != nx + ng {
            return Err(Error::Incompatible(format!("{what}: row has {} values, expected {}", vals.len(), nx + ng)));
        }
        ics.push(InitialCondition {
            x0: StateVector::from_column_slice(&vals[..nx]),
            goal: vals[nx..].to_vec(),
        });
    }
    if field(&meta, "system", &what)? != system.name() {
        return Err(Error::Incompatible(format!("{what}: generated for a different system")));
    }
    if field_usize(&meta, "count", &what)? != ics.len() {
        return Err(Error::Incompatible(format!("{what}: row count does not match header")));
    }
    if field(&meta, "init_hash", &what)? != cfg.init_hash() {
        return Err(Error::Incompatible(format!(
            "{what}: sampled under a different seed, model or dataset section"
        )));
    }
    Ok(ics)
}

fn push_f64s(buf: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Splits a binary artifact into its header fields and f64 payload.
fn read_binary(path: &Path, format: &str) -> Result<(BTreeMap<String, String>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::Incompatible(format!("{what}: missing header line")))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Incompatible(format!("{what}: header is not text")))?;
    if !header.starts_with(format) {
        let found = header.split_whitespace().take(2).collect::<Vec<_>>().join(" ");
        return Err(Error::Incompatible(format!("{what}: expected `{format}`, found `{found}`")));
    }
    let body = &bytes[nl + 1..];
    if body.len() % 8 != 0 {
        return Err(Error::Incompatible(format!("{what}: truncated payload")));
    }
    let vals = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header_fields(header), vals))
}

/// Final trajectories of a run together with their goals.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config_hash: String,
    pub model_hash: String,
    pub goals: Vec<Vec<f64>>,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let first = self
            .trajectories
            .first()
            .ok_or_else(|| Error::Contract("dataset has no trajectories".into()))?;
        let (t, nx, nu) = (first.horizon(), first.states[0].len(), first.controls[0].len());
        let ng = self.goals[0].len();
        let mut buf = format!(
            "{DATASET_FORMAT} config_hash={} model_hash={} n={} horizon={t} state_dim={nx} control_dim={nu} goal_dim={ng}\n",
            self.config_hash,
            self.model_hash,
            self.trajectories.len()
        )
        .into_bytes();
        for (traj, goal) in self.trajectories.iter().zip(&self.goals) {
            if traj.horizon() != t || goal.len() != ng {
                return Err(Error::Contract("dataset trajectories must share shapes".into()));
            }
            push_f64s(&mut buf, goal.iter().copied());
            push_f64s(&mut buf, traj.states.iter().flat_map(|x| x.iter().copied()));
            push_f64s(&mut buf, traj.controls.iter().flat_map(|u| u.iter().copied()));
        }
        write_atomic(path, &buf)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let what = path.display().to_string();
        let (h, vals) = read_binary(path, DATASET_FORMAT)?;
        let n = field_usize(&h, "n", &what)?;
        let t = field_usize(&h, "horizon", &what)?;
        let nx = field_usize(&h, "state_dim", &what)?;
        let nu = field_usize(&h, "control_dim", &what)?;
        let ng = field_usize(&h, "goal_dim", &what)?;
        let per = ng + (t + 1) * nx + t * nu;
        if vals.len() != n * per {
            return Err(Error::Incompatible(format!("{what}: payload size does not match header")));
        }
        let mut goals = Vec::with_capacity(n);
        let mut trajectories = Vec::with_capacity(n);
        for chunk in vals.chunks_exact(per) {
            goals.push(chunk[..ng].to_vec());
            let xs = &chunk[ng..ng + (t + 1) * nx];
            let us = &chunk[ng + (t + 1) * nx..];
            trajectories.push(Trajectory {
                states: xs.chunks_exact(nx).map(StateVector::from_column_slice).collect(),
                controls: us.chunks_exact(nu).map(ControlVector::from_column_slice).collect(),
            });
        }
        Ok(Self {
            config_hash: field(&h, "config_hash", &what)?.to_string(),
            model_hash: field(&h, "model_hash", &what)?.to_string(),
            goals,
            trajectories,
        })
    }
}

/// Policy weights. Parameters are stored layer by layer: the row-major
/// `out x in` weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub dims: Vec<usize>,
    pub activation: Activation,
    /// ADMM iteration that produced the weights (0 for the initial policy).
    pub iteration: usize,
    pub q_bc: f64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_net(net: &Mlp, config_hash: &str, iteration: usize, q_bc: f64) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            dims: net.dims().to_vec(),
            activation: net.activation(),
            iteration,
            q_bc,
            params: net.params().to_vec(),
        }
    }

    pub fn to_net(&self) -> Result<Mlp> {
        Mlp::new(self.dims.clone(), self.activation, self.params.clone())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let dims: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        let mut buf = format!(
            "{CHECKPOINT_FORMAT} config_hash={} dims={} activation={} iteration={} q_bc={} params={}\n",
            self.config_hash,
            dims.join(","),
            self.activation.tag(),
            self.iteration,
            fmt_f64(self.q_bc),
            self.params.len()
        )
        .into_bytes();
        push_f64s(&mut buf, self.params.iter().copied());
        write_atomic(path, &buf)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let what = path.display().to_string();
        let (h, params) = read_binary(path, CHECKPOINT_FORMAT)?;
        let dims: Vec<usize> = field(&h, "dims", &what)?
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::Incompatible(format!("{what}: bad dims"))))
            .collect::<Result<_>>()?;
        if dims.len() < 2 || param_count(&dims) != params.len() || field_usize(&h, "params", &what)? != params.len() {
            return Err(Error::Incompatible(format!("{what}: weight count does not match dims")));
        }
        Ok(Self {
            config_hash: field(&h, "config_hash", &what)?.to_string(),
            dims,
            activation: Activation::from_tag(field(&h, "activation", &what)?)
                .map_err(|e| Error::Incompatible(format!("{what}: {e}")))?,
            iteration: field_usize(&h, "iteration", &what)?,
            q_bc: parse_f64(field(&h, "q_bc", &what)?, &what)?,
            params,
        })
    }
}

/// A CSV table tagged with the config hash it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub config_hash: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(config_hash: &str, columns: &[&str]) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# config_hash={}\n{}\n", self.config_hash, self.columns.join(","));
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let what = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let hash = lines
            .next()
            .and_then(|l| l.strip_prefix("# config_hash="))
            .ok_or_else(|| Error::Incompatible(format!("{what}: missing config hash line")))?;
        let columns: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Incompatible(format!("{what}: missing header row")))?
            .split(',')
            .map(String::from)
            .collect();
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.split(',').map(String::from).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        if rows.iter().any(|r| r.len() != columns.len()) {
            return Err(Error::Incompatible(format!("{what}: ragged rows")));
        }
        Ok(Self {
            config_hash: hash.to_string(),
            columns,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Formats a float for CSV output without losing precision.
pub fn csv_f64(v: f64) -> String {
    fmt_f64(v)
}
