use std::io;
use std::path::PathBuf;

use cogtran::alignment::AlignmentError;
use cogtran::dataio::DataError;
use cogtran::encoding::EncodingError;
use cogtran::metrics::MetricsError;
use cogtran::model::{ArchiveError, ModelError};
use cogtran::phonology::PhonologyError;
use cogtran::training::TrainError;
use cogtran::trimming::TrimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("Usage: {0}")]
    Usage(String),
    #[error("Io: {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("Json: {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("FetchFailed: {0}")]
    Fetch(String),
    #[error("ChecksumMismatch: {name}: expected {expected}, got {actual}")]
    Checksum { name: String, expected: String, actual: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Phonology(#[from] PhonologyError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Trim(#[from] TrimError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Train(TrainError::UnknownTask(_)) => 2,
            _ => 1,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
