//! Experiment runner for continual vision-language training: dataset
//! generation, multi-seed runs, baseline tables and importance studies.
//!
//! Outputs live under `<root>/<hash>/<command>/`, where `<hash>` is the
//! first 16 hex digits of the sha256 of the canonical effective config.
//! Every JSON and CSV file records the full hash and the tool version.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{cmd_gen, cmd_importance, cmd_run, cmd_sweep, Options, RunResult};
pub use config::{Experiment, ExperimentConfig};
pub use error::{CtlError, Result};
pub use output::VERSION;
