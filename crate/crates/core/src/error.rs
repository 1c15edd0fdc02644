use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the simulator, metrics and controller.
///
/// `Validation` covers bad inputs (exit status 1 at the CLI); everything else
/// is a runtime failure (exit status 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown block `{0}`")]
    UnknownBlock(String),

    #[error("block `{0}` covers no grid cell at this resolution")]
    BlockUnresolved(String),

    #[error("resample ratio {ratio} is not an integer")]
    NonIntegerRatio { ratio: f64 },

    #[error("time step {dt} does not evenly divide sample interval {interval}")]
    NonDivisibleStep { dt: f64, interval: f64 },

    #[error("sample interval mismatch: {left} s vs {right} s")]
    IntervalMismatch { left: f64, right: f64 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("insufficient samples: need {needed}, have {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("singular thermal network: no path to ambient")]
    SingularNetwork,

    #[error("m = {m} does not divide n = {n}")]
    Divisibility { n: usize, m: usize },

    #[error("lookup table is empty")]
    EmptyTable,

    #[error("non-monotone calibration response at level {level} W")]
    NonMonotoneCalibration { level: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for input/config problems, false for failures during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::UnknownBlock(_)
                | Error::BlockUnresolved(_)
                | Error::NonIntegerRatio { .. }
                | Error::NonDivisibleStep { .. }
                | Error::IntervalMismatch { .. }
                | Error::LengthMismatch { .. }
                | Error::Divisibility { .. }
                | Error::Parse { .. }
                | Error::MissingColumn { .. }
                | Error::Config { .. }
                | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
