//! Experiment orchestration, verification suites and reports.

use std::path::{Path, PathBuf};

pub mod experiment;
pub mod report;
pub mod tasks;
pub mod verify;

pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome, ResultsTable, RunRecord};
pub use report::{min_max_normalize, report_uncertainty, report_weights, UncertaintyReport, WeightSeries};
pub use tasks::Task;

pub const ENV_OUT_DIR: &str = "PARLAB_OUT_DIR";
pub const ENV_WORKERS: &str = "PARLAB_WORKERS";

/// Explicit argument, then the environment, then the config, then `./out`.
pub fn resolve_out_dir(explicit: Option<&Path>, configured: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(ENV_OUT_DIR).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    configured.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("out"))
}

/// Environment override, then the config, then the available parallelism.
pub fn resolve_workers(configured: Option<usize>) -> usize {
    std::env::var(ENV_WORKERS)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .or(configured)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}
