use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("log of non-positive value {value} at index {index}")]
    NonPositiveLog { index: usize, value: f64 },

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("spatial size {height}x{width} is not divisible by {divisor} (2^depth)")]
    Indivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("bad checkpoint magic {found:?}, expected \"UNSE\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checkpoint does not match the model schema at `{key}`: {reason}")]
    SchemaMismatch { key: String, reason: String },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("missing file {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("mask {sample} contains label {label}, expected 0 or 1")]
    InvalidLabel { sample: String, label: u8 },

    #[error("cannot place shapes: {0}")]
    Placement(String),

    #[error("loss became non-finite at epoch {epoch}, step {step}{}", last_good.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("frozen utility model was modified during training")]
    FrozenModelModified,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
