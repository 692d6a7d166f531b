//! Covariate-adaptive family-wise error rate control.
//!
//! A two-group mixture with a logistic prior null probability and a beta
//! alternative is fitted by EM on censored p-values; the fit yields
//! per-hypothesis thresholds whose weighted sum is held at the target level.

pub mod baselines;
pub mod decision;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod reduce;
pub mod simulation;

pub use error::{Error, Result};

/// Crate version recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
