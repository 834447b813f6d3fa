//! Experiment harness: rosters, data-efficiency curves, shift evaluation,
//! intervention curves, probe comparisons and theory sweeps, driven by JSON
//! configs and written as self-describing result files.

pub mod config;
pub mod data;
pub mod experiments;
pub mod report;

use cbm_core::CbmError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CbmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

impl BenchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => EXIT_CONFIG,
            BenchError::Core(CbmError::TrainingDiverged { .. }) => EXIT_DIVERGED,
            BenchError::Core(
                CbmError::InvalidConfig(_)
                | CbmError::SchemaMismatch(_)
                | CbmError::NotClassification
                | CbmError::InvalidDataset(_)
                | CbmError::Parse { .. }
                | CbmError::DegenerateSampleSize(_),
            ) => EXIT_CONFIG,
            _ => 1,
        }
    }
}
