use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("log_sum_exp of an empty sequence")]
    EmptyInput,

    #[error("degenerate distribution: every entry is log(0)")]
    Degenerate,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("infeasible instance: {0}")]
    Infeasible(String),

    #[error("instance {index}: {source}")]
    Instance {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model corruption: {0}")]
    Corrupt(String),

    #[error("assignment out of range: {0}")]
    Assignment(String),

    #[error("graph structure: {0}")]
    Structure(String),

    #[error("beliefs are not normalized: {0}")]
    Unnormalized(String),

    #[error("step-size calibration failed: every candidate diverged")]
    Calibration,

    #[error("zero-probability event: {0}")]
    ZeroProbability(String),

    #[error("template file line {line}: {message}")]
    Template { line: usize, message: String },

    #[error("model file: format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: String },

    #[error("model file: checksum mismatch")]
    Checksum,

    #[error("model file: malformed section [{section}]: {message}")]
    Malformed { section: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn at_instance(self, index: usize) -> Self {
        match self {
            e @ Error::Instance { .. } => e,
            e => Error::Instance {
                index,
                source: Box::new(e),
            },
        }
    }
}
