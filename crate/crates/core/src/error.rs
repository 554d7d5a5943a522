use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments: mismatched dimensions, too little data, negative weights.
    #[error("invalid input: {0}")]
    Input(String),

    /// A system or experiment configuration that cannot be realized.
    #[error("configuration error: {0}")]
    Config(String),

    /// A matrix that must be inverted is singular at the working tolerance.
    #[error("{what} is singular (min/max diagonal ratio {ratio:.3e})")]
    Singular { what: &'static str, ratio: f64 },

    #[error("QP Hessian is not positive definite")]
    NotPositiveDefinite,

    /// Constraint set is empty. `certificate` is a Farkas vector y >= 0 with
    /// y'G = 0 and y'h < 0.
    #[error("infeasible constraints")]
    Infeasible { certificate: Vec<f64> },

    #[error("QP solver hit the iteration cap ({0})")]
    MaxIter(usize),

    /// Matching-condition search produced no usable evaluation.
    #[error("tuning failed: {0}")]
    Tuning(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
