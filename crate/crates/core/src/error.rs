use thiserror::Error;

use crate::imaging::ImagingError;
use crate::labels::LabelError;
use crate::lunggrid::GridError;
use crate::metrics::MetricError;
use crate::nnet::NetError;
use crate::segbaseline::SegError;

/// Crate-wide error wrapping the per-stage errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Segmentation(#[from] SegError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Coarse error category shared by the CLI exit codes and the service status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad flags, configs or request bodies.
    Validation,
    /// Unreadable, malformed or unusable input data.
    Data,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use ErrorClass::*;
        match self {
            Error::Imaging(ImagingError::InvalidConfig(_) | ImagingError::InvalidInput(_)) => {
                Validation
            }
            Error::Imaging(_) => Data,
            Error::Grid(GridError::InvalidSpec(_)) => Validation,
            Error::Grid(_) => Data,
            Error::Label(
                LabelError::InvalidAnnotation(_)
                | LabelError::InvalidInput(_)
                | LabelError::GridMismatch { .. },
            ) => Validation,
            Error::Label(_) => Data,
            Error::Segmentation(SegError::InvalidConfig(_)) => Validation,
            Error::Segmentation(_) => Data,
            Error::Net(NetError::InvalidConfig(_) | NetError::InvalidInput(_)) => Validation,
            Error::Net(_) => Data,
            Error::Metric(MetricError::InvalidScore(_)) => Validation,
            Error::Metric(_) => Data,
            Error::Io { .. } => Data,
        }
    }
}
