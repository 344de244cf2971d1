//! Experiment harness library behind the `nccl` binary: run configuration,
//! multi-seed orchestration, deterministic CSV emission, verification
//! suites, and fixture generation.

pub mod config;
pub mod diagnose;
pub mod error;
pub mod fixtures;
pub mod output;
pub mod runner;

pub use config::{DatasetCfg, RunConfig, TaskKind};
pub use error::{CliError, Result};
pub use runner::{compare_policies, run_experiment, RunSummary, SeedOutcome};
