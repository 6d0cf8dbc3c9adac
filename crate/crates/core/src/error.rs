use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the domain of a mathematical operation (NaN, empty sequence, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatched tensor or sequence shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller broke an API contract (e.g. backward on a consumed tape).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("filter error at step {step}: {msg}")]
    Filter { step: usize, msg: String },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("weight file error: {0}")]
    WeightFile(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("missing column `{column}` in {path}")]
    MissingColumn { path: String, column: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag, used as the CLI error-line prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Training(_) => "training",
            Error::Inference(_) => "inference",
            Error::Filter { .. } => "filter",
            Error::Calibration(_) => "calibration",
            Error::WeightFile(_) => "weights",
            Error::Parse { .. } => "parse",
            Error::MissingColumn { .. } => "missing-column",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
