use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("placement failed: {placed} of {requested} nanomachines placed after {attempts} candidate draws")]
    Placement {
        requested: usize,
        placed: usize,
        attempts: u64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("thresholds must be strictly descending and non-negative: {0:?}")]
    ThresholdOrder(Vec<f64>),

    #[error("missing channel table for transmitter {tx} -> {rx}")]
    MissingChannel { tx: usize, rx: String },

    #[error("baseline delivery is zero; gain is undefined")]
    ZeroBaseline,

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
