use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("argument outside the domain: {0}")]
    Domain(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("numerical failure at t = {time}: {reason}")]
    Numerical { time: f64, reason: String },

    #[error("memory budget exceeded: need {needed} bytes, budget is {budget} bytes")]
    MemoryBudget { needed: u64, budget: u64 },

    #[error("fit rejected: {0}")]
    FitRejected(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
