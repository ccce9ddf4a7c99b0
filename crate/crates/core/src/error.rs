use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("cannot read {path}: {reason}")]
    UnreadableFormat { path: PathBuf, reason: String },

    #[error("band {band:?} not present (available: {available:?})")]
    BandAbsent { band: String, available: Vec<String> },

    #[error("CRS mismatch: {source_crs} vs {target_crs}")]
    CrsMismatch { source_crs: String, target_crs: String },

    #[error("source and target grids do not overlap")]
    EmptyOverlap,

    #[error("pixel ({row}, {col}) is not covered by any tile")]
    UncoveredPixel { row: usize, col: usize },

    #[error("unmapped class code {code} in product {product}")]
    UnmappedClass { product: String, code: i64 },

    #[error("grids are not aligned: {0}")]
    Misaligned(String),

    #[error("at least {needed} products are required, got {got}")]
    TooFewProducts { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),

    #[error("training diverged at epoch {epoch}, step {step} (non-finite loss)")]
    Diverged { epoch: usize, step: usize },

    #[error("no pixels to evaluate")]
    NoValidPixels,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tiff(#[from] tiff::TiffError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 configuration, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::CheckpointMismatch(_) => 2,
            Error::MissingFile(_)
            | Error::UnreadableFormat { .. }
            | Error::BandAbsent { .. }
            | Error::CrsMismatch { .. }
            | Error::EmptyOverlap
            | Error::UncoveredPixel { .. }
            | Error::UnmappedClass { .. }
            | Error::Misaligned(_)
            | Error::TooFewProducts { .. }
            | Error::Shape(_)
            | Error::NoValidPixels
            | Error::Tiff(_)
            | Error::Json(_) => 3,
            Error::Diverged { .. } | Error::Io { .. } => 4,
        }
    }
}
