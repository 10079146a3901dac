//! Safe active learning of time-series Gaussian-process models.
//!
//! The library plans piecewise input trajectories (ramps in the
//! manipulated-variable space) that maximize an information criterion over
//! the regression model's predictive covariance, subject to a probabilistic
//! safety constraint evaluated under a second, simultaneously learned safety
//! model. Synthetic benchmark systems, run metrics and the theory-check
//! suite round out a reproducible experiment harness.

pub mod benchmarks;
pub mod chol;
pub mod config;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod learner;
pub mod log;
pub mod metrics;
pub mod safety;
pub mod theory;
pub mod trajectory;

pub use error::{Error, Result};
