//! Experiment runner for the Bayesian neural network toolkit: JSON
//! configuration, dataset generation, end-to-end pipelines and
//! reproducible run artifacts.

pub mod artifacts;
pub mod compare;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::{StageError, StageResult};
pub use runner::{generate, run, RunOutcome};
