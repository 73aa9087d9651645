//! Experiment configuration, result files and the command implementations
//! behind the CLI.

mod commands;
mod config;
mod results;

pub use commands::*;
pub use config::{DataConfig, ExperimentConfig, ModelSection, Profile, BUILD_ID};
pub use results::{append_csv_row, append_record, RunRecord, METRIC_COLUMNS};
