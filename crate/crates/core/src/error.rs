use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("singular system (pivot {pivot:e} at column {column}); retry with a positive ridge")]
    Singular { column: usize, pivot: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("mode collapse: generated pixel variance below {threshold:e} for {epochs} consecutive epochs (last {variance:e})")]
    ModeCollapse {
        threshold: f64,
        epochs: usize,
        variance: f64,
    },

    #[error("model has no trained recoder")]
    MissingRecoder,

    #[error("bad magic bytes: {0:?}")]
    BadMagic([u8; 4]),

    #[error("truncated data: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("unsupported dtype tag {0}")]
    DtypeMismatch(u8),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("shape disagreement: {0}")]
    ShapeMismatch(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_mismatch(
    context: &'static str,
    expected: impl ToString,
    got: impl ToString,
) -> Error {
    Error::DimensionMismatch {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
