//! Experiment harness for `dualinv`: synthetic datasets with known ideal
//! noise, inversion runs and sweeps, result files, and plots.

pub mod config;
pub mod dataset;
pub mod edit;
mod error;
pub mod experiment;
pub mod plot;
pub mod sweep;

pub use config::{ExperimentConfig, Method};
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, Lab, ResultRow, Summary};
pub use plot::emit_plots;
pub use sweep::{run_sweep, sweep_with_lab};
