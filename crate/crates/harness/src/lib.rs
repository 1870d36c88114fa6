//! Experiment harness for residual deep Gaussian processes: benchmark targets,
//! data ingestion, Bayesian optimisation and report emission.

pub mod acquisition;
pub mod bayesopt;
pub mod benchmarks;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod experiments;
pub mod report;

pub use error::{HarnessError, Result};
