//! Experiment runner: `train`, `compare`, `pca` and `budget` commands over
//! synthetic multi-task suites.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{cmd_budget, cmd_compare, cmd_pca, cmd_train, BudgetArgs, Overrides};
pub use config::{ExperimentConfig, Variant};
pub use error::{CliError, CliResult};
