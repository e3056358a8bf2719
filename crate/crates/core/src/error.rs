//! Crate-level error for configuration, checkpoints and pipeline runs.

use std::path::PathBuf;

use thiserror::Error;

use crate::classifier::ClassifierError;
use crate::data::DataError;
use crate::detector::DetectorError;
use crate::metrics::MetricsError;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user input: a bad config value, an unlabeled set where labels are required, and so on.
    #[error("{0}")]
    Invalid(String),
    #[error("required file not found: {0}")]
    MissingFile(PathBuf),
    #[error("config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Splits failures into bad input (validation) and failures while running.
pub trait ErrorClass {
    fn is_validation(&self) -> bool;
}

impl ErrorClass for DataError {
    fn is_validation(&self) -> bool {
        matches!(self, DataError::Validation(_) | DataError::Split(_) | DataError::Synthetic(_))
    }
}

impl ErrorClass for DetectorError {
    fn is_validation(&self) -> bool {
        matches!(
            self,
            DetectorError::Config(_) | DetectorError::Prior(_) | DetectorError::EmptyDataset
        )
    }
}

impl ErrorClass for ClassifierError {
    fn is_validation(&self) -> bool {
        matches!(
            self,
            ClassifierError::Config(_) | ClassifierError::EmptyDataset | ClassifierError::EmptyClass(_) | ClassifierError::Label { .. }
        )
    }
}

impl ErrorClass for MetricsError {
    fn is_validation(&self) -> bool {
        matches!(
            self,
            MetricsError::NoGroundTruth | MetricsError::Split(_) | MetricsError::DuplicateId(_)
        )
    }
}

impl ErrorClass for Error {
    fn is_validation(&self) -> bool {
        match self {
            Error::Invalid(_) | Error::MissingFile(_) | Error::ConfigParse { .. } | Error::Checkpoint { .. } => true,
            Error::Data(e) => e.is_validation(),
            Error::Detector(e) => e.is_validation(),
            Error::Classifier(e) => e.is_validation(),
            Error::Metrics(e) => e.is_validation(),
            Error::Io { .. } | Error::Image { .. } | Error::Json(_) => false,
        }
    }
}

impl Error {
    pub fn is_validation(&self) -> bool {
        ErrorClass::is_validation(self)
    }

    /// Process exit status: 1 for validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            1
        } else {
            2
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
