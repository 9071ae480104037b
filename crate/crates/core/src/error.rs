//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid quantization scheme: {0}")]
    InvalidScheme(String),

    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    #[error("value {value} outside representable range [{min}, {max}]")]
    OutOfRange { value: i64, min: i64, max: i64 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("packing spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("operand has a buffer bit set (payload {0:#x})")]
    BufferBitSet(u64),

    #[error("weight {0} outside {{-1, 0, 1}}; packed modes need binary or ternary weights")]
    WeightRange(i64),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid accumulator mode: {0}")]
    InvalidMode(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("inconsistent model: {0}")]
    InconsistentModel(String),

    #[error("manifest version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("configuration invalid: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("training diverged in stage {stage} at epoch {epoch} (validation accuracy {accuracy:.4})")]
    Divergence {
        stage: String,
        epoch: usize,
        accuracy: f64,
    },

    #[error("overflow target unreachable: {0}")]
    Unreachable(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
