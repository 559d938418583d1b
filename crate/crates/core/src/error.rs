use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input contract violated at index {index}: {reason}")]
    InputContract { index: usize, reason: String },

    #[error("incompatible architecture: {0}")]
    IncompatibleArchitecture(String),

    #[error("model is frozen: {0}")]
    FrozenModel(String),

    #[error("non-finite numeric input: {0}")]
    NumericInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch contract violated: {0}")]
    BatchContract(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("label {0} is outside {{0, 1}}")]
    Label(usize),

    #[error("feature store contract violated: {0}")]
    StoreContract(String),

    #[error("ingestion failed for {}: {reason}", paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    Ingestion { paths: Vec<PathBuf>, reason: String },

    #[error("training protocol violated: {0}")]
    Protocol(String),

    #[error("teacher under-trained: validation F1 {f1:.4} below required {required:.4}")]
    UnderTrainedTeacher { f1: f64, required: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing split {0}")]
    MissingSplit(String),

    #[error("acceptance check failed: {0}")]
    AcceptanceCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::IncompatibleArchitecture(_) => 1,
            Error::Protocol(_) | Error::FrozenModel(_) | Error::UnderTrainedTeacher { .. } => 3,
            Error::AcceptanceCheck(_) => 4,
            _ => 2,
        }
    }
}
