use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("{name} = {value} is outside its domain {domain}")]
    Domain { name: &'static str, value: f64, domain: &'static str },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension { context: &'static str, expected: usize, got: usize },

    #[error("matrix is not positive definite (pivot at index {pivot}); the graph may be disconnected or degenerate")]
    NotPositiveDefinite { pivot: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite log-likelihood at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("solver did not converge after {iterations} iterations (kkt residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data { path: path.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Errors caused by unusable numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::NonFinite { .. } | Error::NoConvergence { .. }
        )
    }

    /// Errors caused by malformed or inconsistent data files.
    pub fn is_data(&self) -> bool {
        matches!(self, Error::Data { .. } | Error::Io { .. } | Error::InsufficientData(_) | Error::Graph(_))
    }
}
