use thiserror::Error;

pub type Result<T, E = CbmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CbmError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("singular design: condition estimate {condition:.3e} exceeds {threshold:.0e}")]
    SingularDesign { condition: f64, threshold: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is not a classification task")]
    NotClassification,
    #[error("every concept was removed by the sparsity filter")]
    AllConceptsFiltered,
    #[error("empty result: {0}")]
    EmptyResult(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("binary cross-entropy label {0} is not 0 or 1")]
    NonBinaryLabel(f64),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },
    #[error("model does not support concept intervention: {0}")]
    NotInterventable(String),
    #[error("unknown concept group {0}")]
    UnknownGroup(usize),
    #[error("sample size too small: {0}")]
    DegenerateSampleSize(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
