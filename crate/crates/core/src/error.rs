use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite update at step {step}: {detail}")]
    NonFiniteUpdate { step: usize, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("bad magic 0x{found:08x} in {path} (expected 0x{expected:08x})")]
    IdxMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("truncated IDX file {path}: need {expected} bytes, found {actual}")]
    IdxTruncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
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

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Stable machine-readable kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::NonFiniteActivation { .. } => "non-finite-activation",
            Error::NonFiniteUpdate { .. } => "non-finite-update",
            Error::NonFinite(_) => "non-finite",
            Error::IdxMagic { .. } => "idx-magic",
            Error::IdxTruncated { .. } => "idx-truncated",
            Error::IdxCountMismatch { .. } => "idx-count-mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit status: 2 for bad input, 3 for numeric aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteActivation { .. } | Error::NonFiniteUpdate { .. } | Error::NonFinite(_) => 3,
            Error::Shape(_) | Error::Json(_) => 1,
            _ => 2,
        }
    }
}
