use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::ImageId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("proposal index {index} out of range for image {image} ({len} proposals)")]
    IndexOutOfRange { image: ImageId, index: usize, len: usize },

    #[error("image {0} has no proposal overlapping its ground truth")]
    NoPositiveProposal(ImageId),

    #[error("unknown image id {0}")]
    UnknownImage(ImageId),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("no unannotated images left to query")]
    EmptyCandidates,

    #[error("annotated set is empty")]
    EmptyAnnotated,

    #[error("test split is empty")]
    EmptyTestSplit,

    #[error("{path}, line {line}: {message}", path = path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("leakage: image {0} used for training without being annotated")]
    Leakage(ImageId),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code for each error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::DimensionMismatch { .. }
            | Error::IndexOutOfRange { .. }
            | Error::NoPositiveProposal(_)
            | Error::UnknownImage(_) => 2,
            Error::Config(_) => 3,
            Error::Io(_) => 4,
            Error::Parse { .. } | Error::Format(_) | Error::Json(_) => 5,
            Error::Schema(_) => 6,
            Error::EmptyTrainingSet | Error::Divergence(_) => 7,
            Error::EmptyCandidates | Error::EmptyAnnotated | Error::EmptyTestSplit => 8,
            Error::Leakage(_) => 9,
        }
    }
}
