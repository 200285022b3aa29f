use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rank {rank}: must satisfy 1 <= rank <= min({d}, {k})")]
    InvalidRank { rank: usize, d: usize, k: usize },

    #[error("invalid alpha {0}: must be positive")]
    InvalidAlpha(f64),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("missing required parameter `{0}`")]
    MissingParameter(String),

    #[error("shape conflict for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeConflict {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("backbone fingerprint mismatch: checkpoint expects {expected}, backbone is {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("checkpoint incompatible with config: {0}")]
    IncompatibleCheckpoint(String),

    #[error("non-finite loss {loss} at step {step} (epoch {epoch})")]
    NonFiniteLoss { loss: f64, step: usize, epoch: usize },

    #[error("subset width {requested} exceeds identity count {available}")]
    SubsetTooWide { requested: usize, available: usize },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid pair protocol: {0}")]
    InvalidProtocol(String),

    #[error("fold {0} has no pairs")]
    MissingFold(usize),

    #[error("group `{0}` has no pairs")]
    EmptyGroup(String),

    #[error("bias report needs at least 2 groups, got {0}")]
    TooFewGroups(usize),

    #[error("need at least one genuine and one impostor score")]
    DegenerateScores,

    #[error("missing image `{0}`")]
    MissingImage(String),

    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed container: {0}")]
    Container(String),

    #[error("mapping file line {line}: {reason}")]
    Mapping { line: usize, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
