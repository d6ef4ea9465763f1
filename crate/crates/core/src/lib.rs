//! Trajectory-optimization-guided policy learning with adversarial smoothness
//! regularization.
//!
//! Trajectory optimization (DDP) and neural behavioral cloning are coupled
//! through ADMM consensus. The policy update can use plain behavioral
//! cloning, Gaussian input augmentation, conventional adversarial
//! regularization, or the Stackelberg variant that differentiates through the
//! inner perturbation updates.

pub mod admm;
pub mod advreg;
pub mod costs;
pub mod ddp;
pub mod envs;
pub mod error;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod policy;

pub use admm::{AdmmOutcome, AdmmProblem, AdmmSettings, AdmmState, TrajectoryTask};
pub use advreg::{PerturbationConfig, PerturbationTape, Regularizer, TrainConfig};
pub use costs::{AdmmResidual, QuadraticCost};
pub use ddp::{DdpGains, DdpSettings, DdpSolution, Trajectory};
pub use envs::{CartPole, CartPoleParams, ControlVector, Dynamics, LinearModel, PlanarArm, PlanarArmParams, StateVector, System};
pub use error::{Error, Result};
pub use eval::{DisturbanceKind, DisturbanceSpec, RolloutResult};
pub use io::RunConfig;
pub use policy::{Activation, Mlp};
