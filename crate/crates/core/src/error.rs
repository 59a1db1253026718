use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported dtype `{dtype}` for tensor `{name}` (only F32 is accepted)")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("learning rate {rate} at step {step} is not strictly positive")]
    NonPositiveRate { step: usize, rate: f64 },

    #[error("task vector {index} carries no training metadata")]
    MissingTrainingMeta { index: usize },

    #[error("bad threshold rho = {0}: FedGMA requires 0 < rho <= 1")]
    BadThreshold(f64),

    #[error("invalid merge spec: {0}")]
    BadMergeSpec(String),

    #[error("bad task family spec: {0}")]
    BadSpec(String),

    #[error("bad parameter `{name}`: {reason}")]
    BadParameter { name: &'static str, reason: String },

    #[error("degenerate aggregation weight w[{index}] = {value}")]
    DegenerateWeight { index: usize, value: f64 },

    #[error("optimum oracle did not converge: gradient norm {grad_norm:e} after {steps} steps")]
    OracleNotConverged { grad_norm: f64, steps: usize },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
