//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DpdError {
    /// An angle, probability or other scalar outside its admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    /// A structurally invalid argument (zero step count, L < M, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token error: {0}")]
    Token(String),

    /// Non-finite or otherwise unusable numeric data.
    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: truncated ({0})")]
    Truncated(String),

    #[error("checkpoint: payload digest mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    DigestMismatch { stored: u64, computed: u64 },

    #[error("checkpoint: malformed header: {0}")]
    Header(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DpdError>;

pub(crate) fn shape_err(what: &str, a: &[usize], b: &[usize]) -> DpdError {
    DpdError::Shape(format!("{what}: {a:?} vs {b:?}"))
}
