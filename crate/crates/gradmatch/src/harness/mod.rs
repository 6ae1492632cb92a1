//! Config-driven experiment runners and the `gradmatch` CLI.
//!
//! Every runner is a pure function of `(config, master_seed)`: each run cell
//! derives its RNG streams from its indices, the fan-out over cells is
//! order-preserving, and CSV floats render deterministically, so reruns (and
//! parallel runs) produce byte-identical CSV files. Wall-clock timings go to
//! the JSON manifest, never into CSV.

pub mod cli;
pub mod config;
pub mod csvio;
pub mod parallel;
pub mod runners;

use thiserror::Error;

use crate::estimator::EstimatorError;
use crate::models::ModelError;
use crate::oracles::OracleError;
use crate::regfam::RegError;
use crate::rng::RngStream;
use crate::synthdata::DataError;
use crate::training::TrainingError;
use config::ConfigError;
use csvio::CsvTable;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Everything a runner produces: named CSV tables, one summary line per cell,
/// and run-failure accounting for the exit code.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub experiment: String,
    pub tables: Vec<(String, CsvTable)>,
    pub summary: Vec<String>,
    pub total_runs: usize,
    pub failures: usize,
}

/// Deterministic seed derivation for one labeled stream of one run.
pub fn derive_seed(master_seed: u64, label: &str) -> u64 {
    RngStream::new(master_seed, label).next_u64()
}
