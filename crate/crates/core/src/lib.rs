//! Federated learning simulator for sharpness-aware local training.
//!
//! Eight algorithms share one round loop: each is a pairing of a
//! [`PerturbationRule`] (none, local-gradient SAM, or a globally estimated
//! direction) with a [`CorrectionRule`] (none, control variates, or a
//! dynamic regularizer). Data is synthetic: Gaussian blobs split across
//! clients, or a family of per-client quadratics with known constants.

pub mod algorithms;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod params;
pub mod rng;
pub mod runner;

pub use algorithms::{Algorithm, AlgorithmSpec, CorrectionRule, PerturbationRule};
pub use config::{parse_config, parse_run_config, RunConfig};
pub use error::{Error, Result};
pub use metrics::RoundMetrics;
pub use model::{Batch, ModelSpec};
pub use orchestrator::{run_experiment, DataConfig, Experiment, ExperimentConfig, ModelKind, RunOutput, SplitConfig};
pub use params::ParamVector;
