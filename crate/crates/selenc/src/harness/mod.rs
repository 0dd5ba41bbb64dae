//! Config-driven experiment orchestration and report emission.

pub mod config;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use report::ExperimentReport;
pub use sweep::{had_errors, run_sweep, run_sweep_with_exec};
