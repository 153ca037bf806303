use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SdaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SdaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch at {layer}: expected width {expected}, got {got}")]
    Dimension {
        layer: String,
        expected: usize,
        got: usize,
    },

    #[error("unknown modality `{got}`; registered modalities: {registered}")]
    UnknownModality { got: String, registered: String },

    #[error("KL divergence undefined: p[{index}] = 0 where t[{index}] > 0")]
    KlSupport { index: usize },

    #[error("invalid probability row: {0}")]
    InvalidDistribution(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{0} not found")]
    NotFound(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown item id `{0}`")]
    UnknownItem(String),

    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("provenance mismatch: expected {expected}, found {found}")]
    Provenance { expected: String, found: String },

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SdaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
