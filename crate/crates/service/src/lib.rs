//! Configuration, query engine, HTTP API, experiment runners and the CLI
//! command implementations behind the `cxrmetric` binary.

pub mod cli;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod http;
pub mod overlay;

use std::path::{Path, PathBuf};

use thiserror::Error;

use cxrmetric_core::dataset::DatasetError;
use cxrmetric_core::embedder::{CheckpointError, EmbedError};
use cxrmetric_core::metric::MetricError;
use cxrmetric_core::preprocess::PreprocessError;
use cxrmetric_core::retrieval::RetrievalError;
use cxrmetric_core::synthdata::SynthError;
use cxrmetric_core::transfer::TransferError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("model hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Retrieval(RetrievalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

impl From<RetrievalError> for ServiceError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::HashMismatch { expected, found } => ServiceError::HashMismatch { expected, found },
            other => ServiceError::Retrieval(other),
        }
    }
}

impl ServiceError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ServiceError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// HTTP status for this error.
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::BadRequest(_) | ServiceError::ShapeMismatch(_) => 400,
            ServiceError::Retrieval(RetrievalError::InvalidK) => 400,
            ServiceError::NotFound(_) => 404,
            ServiceError::HashMismatch { .. } => 409,
            _ => 500,
        }
    }
}
