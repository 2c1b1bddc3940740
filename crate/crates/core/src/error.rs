use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("unpaired sample: {0}")]
    UnpairedSample(String),

    #[error("unknown label {label} in {source_name}")]
    UnknownLabel { label: u8, source_name: String },

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("unknown task {0:?}")]
    UnknownTask(String),

    #[error("dataset not found: {}", .0.display())]
    DatasetNotFound(PathBuf),

    #[error("malformed dataset: {0}")]
    MalformedDataset(String),

    #[error("meta-dataset has no tasks")]
    EmptyMetaDataset,

    #[error("non-finite {what} during {context}")]
    NonFinite { what: &'static str, context: String },

    #[error("incomplete cell {0}")]
    IncompleteCell(String),

    #[error("records mix tasks {0:?} and {1:?}")]
    MixedTasks(String, String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("plotting failed: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used to pick process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorKind::Config,
            Error::NonFinite { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
