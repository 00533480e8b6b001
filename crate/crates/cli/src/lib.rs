//! Command-line orchestration for the roomdiff pipeline: experiment configs,
//! per-phase commands, the run ledger, the ablation harness and plots.

pub mod config;
pub mod error;
pub mod ledger;
pub mod llm;
pub mod pipeline;
pub mod plot;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
