//! Config-driven front end: synthesis, training, sampling, evaluation,
//! refinement, schedule export, gradient checks and ablation sweeps.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use report::{MetricsReport, MetricsRow, RunMetrics};
