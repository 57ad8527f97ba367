use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes surfaced by the checkpoint reader.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"VXCK\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("tensor `{name}` has dims {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint entry `{0}` is not a tensor of this model")]
    UnknownEntry(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingEntry(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl CheckpointError {
    pub fn category(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic { .. } => "bad-magic",
            CheckpointError::VersionMismatch { .. } => "version-mismatch",
            CheckpointError::Truncated { .. } => "truncated",
            CheckpointError::ShapeMismatch { .. } => "shape-mismatch",
            CheckpointError::UnknownEntry(_) | CheckpointError::MissingEntry(_) => "entry-mismatch",
            CheckpointError::Malformed(_) => "malformed",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f32 },
    #[error("capture was not produced by a forward pass of this model")]
    StaleCapture,
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("config error: {0}")]
    Config(String),
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category, used for CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonFinite(_) => "non-finite",
            Error::Diverged { .. } => "diverged",
            Error::StaleCapture => "stale-capture",
            Error::Checkpoint(e) => e.category(),
            Error::Config(_) => "config",
            Error::Step { source, .. } => source.category(),
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Image(_) => "image",
        }
    }
}
