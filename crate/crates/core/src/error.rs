use std::path::PathBuf;

use thiserror::Error;

use crate::network::NetworkWeights;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no valid pixels to build a histogram from")]
    EmptyHistogram,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("rank-deficient least-squares design: {0}")]
    RankDeficient(String),

    #[error("illuminant sampling rejected {0} consecutive draws")]
    SamplingExhausted(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown camera `{0}`")]
    UnknownCamera(String),

    #[error("gradient check is not reproducible: two forward passes disagreed")]
    NonDeterministic,

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
        last_good: Box<NetworkWeights>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {msg}")]
    Format { what: String, msg: String },
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            msg: msg.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::EmptyHistogram
            | Error::Empty(_)
            | Error::UnknownCamera(_)
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::Shape(_) => ErrorClass::Data,
            Error::NonFinite(_)
            | Error::Domain(_)
            | Error::Singular(_)
            | Error::RankDeficient(_)
            | Error::SamplingExhausted(_)
            | Error::NonDeterministic
            | Error::NonScalarOutput(_)
            | Error::Diverged { .. } => ErrorClass::Numerical,
        }
    }
}
