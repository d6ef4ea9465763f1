//! `trajreg` command line.
//!
//! Exit codes: 0 success, 1 config or schema error, 2 training failure,
//! 3 incompatible artifact. `TRAJREG_THREADS` sets the worker count.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use trajreg_core::eval::DisturbanceKind;
use trajreg_core::io::read_initial_conditions;
use trajreg_core::{pipeline, Error, RunConfig};

#[derive(Parser)]
#[command(name = "trajreg", version, about = "Trajectory-guided policy learning with adversarial regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Sensor,
    Transition,
    Mismatch,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reg {
    None,
    Gaussian,
    Ar,
    Sar,
}

#[derive(Subcommand)]
enum Command {
    /// Sample training initial conditions.
    GenInit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run ADMM training.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `training.regularizer`.
        #[arg(long, value_enum)]
        regularizer: Option<Reg>,
    },
    /// Evaluate a checkpoint, or retrain and evaluate over perturbation bounds.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "epsilon_sweep")]
        checkpoint: Option<PathBuf>,
        /// Dataset written by `train`; its states are used for the Lipschitz estimate.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Replace the configured disturbances by one per magnitude.
        #[arg(long, value_delimiter = ',')]
        zeta: Vec<f64>,
        #[arg(long, value_enum, default_value = "sensor")]
        kind: Kind,
        /// Retrain per bound in {0, 0.005, 0.01, 0.025, 0.05}; needs --init.
        #[arg(long, requires = "init")]
        epsilon_sweep: bool,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Merge percentile tables under a directory into `report.csv`.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Io { .. } => 1,
        Error::Training(_) | Error::NotPositiveDefinite(_) | Error::IntegrationOverflow(_) | Error::Dynamics(_) => 2,
        Error::Incompatible(_) | Error::Contract(_) => 3,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenInit { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let ics = pipeline::gen_init(&cfg, &out)?;
            println!("wrote {} initial conditions to {}", ics.len(), out.display());
        }
        Command::Train {
            config,
            init,
            out,
            regularizer,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(r) = regularizer {
                use trajreg_core::Regularizer as R;
                cfg.training.regularizer = match r {
                    Reg::None => R::None,
                    Reg::Gaussian => R::Gaussian,
                    Reg::Ar => R::Ar,
                    Reg::Sar => R::Sar,
                };
            }
            let t = pipeline::train_from_file(&cfg, &init, &out)?;
            for r in &t.outcome.state.history {
                println!(
                    "iter {:>3}  q_bc {:.6e}  residual_x {:.3e}  residual_u {:.3e}",
                    r.iteration, r.q_bc, r.primal_residual_x, r.primal_residual_u
                );
            }
            println!("best iteration {} -> {}", t.outcome.best_iteration, t.checkpoint_path.display());
        }
        Command::Eval {
            config,
            checkpoint,
            dataset,
            out,
            zeta,
            kind,
            epsilon_sweep,
            init,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if !zeta.is_empty() {
                let kind = match kind {
                    Kind::Sensor => DisturbanceKind::Sensor,
                    Kind::Transition => DisturbanceKind::Transition,
                    Kind::Mismatch => DisturbanceKind::ModelMismatch,
                };
                cfg.eval.disturbances = pipeline::zeta_sweep(kind, &zeta);
                cfg.validate()?;
            }
            if epsilon_sweep {
                let init = init.expect("clap enforces --init");
                let ics = read_initial_conditions(&init, &cfg)?;
                let table = pipeline::epsilon_sweep(&cfg, &ics, &pipeline::EPSILON_SWEEP, &out)?;
                print!("{}", table.to_text());
                return Ok(());
            }
            let net = pipeline::load_policy(&cfg, &checkpoint.expect("clap enforces --checkpoint"))?;
            let ds = dataset.map(|p| pipeline::load_dataset(&cfg, &p)).transpose()?;
            let s = pipeline::evaluate(&cfg, &net, ds.as_ref(), &out)?;
            for d in &s.disturbances {
                println!(
                    "{:<20} success {:.2}  mean task error {:.4e}  diverged {}",
                    d.spec.label(),
                    d.success_rate(),
                    d.mean_task_error(),
                    d.diverged
                );
            }
            println!("median local Lipschitz {:.4e}", s.median_lipschitz());
        }
        Command::Report { dir } => {
            let t = pipeline::report(&dir)?;
            println!("merged {} series into {}", t.columns.len() - 1, dir.join("report.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("TRAJREG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
