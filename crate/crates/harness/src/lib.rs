//! Sweep runner for token/precision trade-off experiments.
//!
//! A [`config::SweepConfig`] declares a grid over eviction policy, bit width,
//! token multiplier, group size, quantization layout and per-layer overrides.
//! [`sweep::run_sweep`] evaluates every grid point on synthetic prompts
//! ([`task`]) and [`report`] writes the results as CSV or a text table.

pub mod config;
pub mod error;
pub mod report;
pub mod sweep;
pub mod task;

pub use config::SweepConfig;
pub use error::{HarnessError, Result};
pub use sweep::{run_sweep, SweepRow};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "KVQP_OUT_DIR";
