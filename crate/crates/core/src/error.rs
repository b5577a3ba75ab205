use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LluError>;

#[derive(Debug, Error)]
pub enum LluError {
    #[error("vector norm {norm:e} is too small to normalize")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("invalid set: {0}")]
    InvalidSet(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad magic {0:?}, expected \"LLUF\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt record at byte offset {offset}: {reason}")]
    CorruptRecord { offset: u64, reason: String },

    #[error("vector {index} has norm {norm}, outside [0.99, 1.01]")]
    UnnormalizedVector { index: usize, norm: f64 },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("expected a {expected} file, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("mask mode `{0}` needs a non-empty anchor set")]
    EmptyAnchorSet(String),

    #[error("unknown mask mode `{0}`")]
    UnknownMaskMode(String),

    #[error("clustering input is empty")]
    EmptyInput,

    #[error("cluster {cluster} has a zero mean (antipodal members)")]
    DegenerateCluster { cluster: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("need at least 2 classes for a base/new split, found {0}")]
    TooFewClasses(usize),

    #[error("evaluation set is empty")]
    EmptyEvaluationSet,
}

impl LluError {
    /// Numerical failures (divergence) as opposed to usage or data errors.
    pub fn is_numerical(&self) -> bool {
        matches!(self, LluError::NonFiniteLoss { .. })
    }
}
