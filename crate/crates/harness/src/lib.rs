//! Experiment harness for the rank-reduced Kalman filter: configuration,
//! metrics, scenario runs, scaling benchmarks and the acceptance suite.

pub mod acceptance;
pub mod bench;
pub mod config;
pub mod error;
pub mod experiment;
pub mod export;
pub mod metrics;
pub mod output;

pub use config::{ExperimentConfig, Method, ScenarioKind};
pub use error::{HarnessError, Result};
