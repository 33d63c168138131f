use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("network configuration failed validation: {0}")]
    InvalidNetwork(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("sensor at segment {sensor} lies outside the interval [{lo}, {hi}] between unmeasured ramps")]
    SensorOutsideInterval { sensor: usize, lo: usize, hi: usize },

    #[error("no flow sensor available between unmeasured ramps at segments {upstream} and {downstream}")]
    MissingIntervalSensor { upstream: usize, downstream: usize },

    #[error("no measured flow supplied for the measured ramp at segment {0}")]
    MissingRampFlow(usize),

    #[error("{which} is not symmetric positive definite")]
    NotPositiveDefinite { which: &'static str },

    #[error("innovation covariance is singular or ill-conditioned at step {step} (condition estimate {condition:e})")]
    SingularInnovation { step: usize, condition: f64 },

    #[error("CFL condition violated at step {step}, segment {segment}: T*v/dx = {ratio:.4}")]
    Cfl {
        step: usize,
        segment: usize,
        ratio: f64,
    },

    #[error("unknown scenario preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
