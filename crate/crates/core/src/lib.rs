//! Particle simulations of mean-field TD learning with two-layer networks
//! on finite MDPs, and the diagnostics used to study them.
//!
//! Modules:
//! - [`env`]: finite MDPs, policies, stationary distributions, tabular Bellman solvers
//! - [`network`]: activation, particle ensembles, network outputs, kernel Gram matrices
//! - [`dynamics`]: TD, Q-learning, soft Q-learning, expected/continuous/ideal-particle variants
//! - [`ot`]: Wasserstein distances between ensembles
//! - [`metrics`]: optimality gap, residuals, drift, monotonicity and κ diagnostics
//! - [`fit`]: scaling-law fits
//! - [`experiment`]: config-driven experiments writing CSV

pub mod dynamics;
pub mod env;
pub mod error;
pub mod experiment;
pub mod fit;
pub mod metrics;
pub mod network;
pub mod ot;

pub use dynamics::{run, DynamicsKind, RunConfig, RunOutput, RunStatus, Trajectory};
pub use env::{FiniteMdp, MdpSpec, Policy, QTable, StationaryDistribution, TransitionTuple};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, ExperimentKind};
pub use fit::{LineFit, SlopeFit};
pub use metrics::RunRecord;
pub use network::{ActivationSpec, KernelMatrix, ParticleEnsemble};
pub use ot::DistanceReport;
