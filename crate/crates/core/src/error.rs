use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("configuration error at layer {layer}: {reason}")]
    LayerConfig { layer: usize, reason: String },

    #[error("syntax error at line {line}, column {column}: {reason}")]
    Syntax {
        line: usize,
        column: usize,
        reason: String,
    },

    #[error("tensor has an empty spatial extent")]
    EmptySpatialExtent,

    #[error("invalid control signal: {0}")]
    InvalidControl(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("training diverged at layer {layer}: loss is not finite")]
    Divergence { layer: usize },

    #[error("sharpening diverged: gradient is not finite")]
    SharpeningDivergence,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: usize,
        reason: String,
    },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a numerical or runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::LayerConfig { .. }
                | Error::Syntax { .. }
                | Error::Shape(_)
                | Error::InvalidLabel(_)
                | Error::Io { .. }
                | Error::Format { .. }
                | Error::EmptyDataset
                | Error::Version { .. }
        )
    }
}
