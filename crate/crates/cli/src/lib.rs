//! Experiment runner behind the `proder` binary: data generation, cell
//! execution with cached Joint baselines, CSV reporting and sweeps.

pub mod config;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::{parse_methods, RunConfig, Sizing};
pub use run::{execute, RunOptions, RunSummary};
