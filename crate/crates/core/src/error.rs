use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed clip: expected {expected} tokens, got {got}")]
    MalformedClip { expected: usize, got: usize },

    #[error("token id {0} out of range")]
    TokenId(u32),

    #[error("shape mismatch in `{tensor}`: expected {expected:?}, got {got:?}")]
    Shape {
        tensor: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("non-finite values in `{0}`")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("calibration target {target} unreachable after {iterations} bisection iterations")]
    UnreachableTarget { target: f64, iterations: usize },

    #[error("all paired differences are zero")]
    AllTies,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedClip { .. } => "malformed_clip",
            Error::TokenId(_) => "token_id",
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Divergence(_) => "divergence",
            Error::UnreachableTarget { .. } => "unreachable_target",
            Error::AllTies => "all_ties",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::MissingPrerequisite(_) => "missing_prerequisite",
            Error::SchemaMismatch(_) => "schema_mismatch",
            Error::Parse(_) => "parse",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
