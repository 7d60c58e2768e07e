//! Experiment runner for the `pbam` library: configuration files, runs with
//! metric traces, the scaling benchmark and the `pbam` command-line tool.

pub mod cli;
pub mod config;
pub mod error;
pub mod metric;
pub mod run;
pub mod scale;

pub use config::{Algorithm, RunConfig, TargetSpec};
pub use error::{HarnessError, Result};
