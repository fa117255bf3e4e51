//! Crate-wide error type and its exit-code classification.

use std::path::PathBuf;

use thiserror::Error;

use crate::aggregate::AggregateError;
use crate::align::AlignError;
use crate::cluster::ClusterError;
use crate::ingest::IngestError;
use crate::labeler::LabelError;
use crate::report::ReportError;
use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    External(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, mapped to a process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments, configuration or missing inputs.
    Usage,
    /// Input data violates an invariant.
    Data,
    /// The labeling service failed.
    External,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::External => 3,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use ErrorKind::*;
        match self {
            Error::Usage(_) | Error::Io { .. } => Usage,
            Error::Data(_) => Data,
            Error::External(_) => External,
            Error::Store(StoreError::Io { .. }) => Usage,
            Error::Store(_) => Data,
            Error::Ingest(IngestError::Io { .. }) => Usage,
            Error::Ingest(_) => Data,
            Error::Aggregate(AggregateError::BadFilter(_) | AggregateError::BadStride(_)) => Usage,
            Error::Aggregate(AggregateError::Store(StoreError::Io { .. })) => Usage,
            Error::Aggregate(_) => Data,
            Error::Cluster(
                ClusterError::TooFewPoints { .. } | ClusterError::ZeroK | ClusterError::WardTooLarge { .. } | ClusterError::Io { .. },
            ) => Usage,
            Error::Cluster(_) => Data,
            Error::Align(AlignError::BadTheta(_)) => Usage,
            Error::Align(AlignError::Store(StoreError::Io { .. }) | AlignError::Cluster(ClusterError::Io { .. })) => Usage,
            Error::Align(_) => Data,
            Error::Label(LabelError::MissingCredential | LabelError::NoWords | LabelError::Io { .. }) => Usage,
            Error::Label(_) => External,
            Error::Report(ReportError::Io { .. } | ReportError::NoRecords) => Usage,
            Error::Report(_) => Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind().exit_code()
    }
}
