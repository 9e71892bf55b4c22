//! Rank-reduced Kalman filtering and smoothing.
//!
//! Covariances are carried as tall `n × r` square-root factors and pushed
//! through prediction, correction and backward smoothing without forming
//! `n × n` matrices. Process noise comes from a dynamical low-rank
//! integrator for the Lyapunov equation. Dense and ensemble baselines and
//! the benchmark problems live alongside.

pub mod error;
pub mod linalg;
pub mod operator;
pub mod sde;
pub mod dlra;
pub mod filter;
pub mod smoother;
pub mod models;
pub mod baselines;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
