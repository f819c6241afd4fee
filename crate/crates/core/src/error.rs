use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulation and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    ParameterDomain(String),

    #[error("{what} = {value} is outside its domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("not available: {0}")]
    NotAvailable(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("post-selection at eta_ps = {threshold} leaves no probability mass")]
    EmptyPostSelection { threshold: f64 },

    #[error("truncation at nmax = {nmax} leaves tail mass {tail:e} above tolerance {tolerance:e}")]
    Truncation {
        nmax: usize,
        tail: f64,
        tolerance: f64,
    },

    #[error("skewness undefined for zero variance")]
    SkewnessUndefined,

    #[error("relative error undefined: continuous {0} is zero")]
    RelativeErrorUndefined(&'static str),

    #[error("click counts required but only probabilities are present")]
    CountsRequired,

    #[error("incomplete ensemble: no statistics for eta = {eta}")]
    IncompleteEnsemble { eta: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{}:{line}: {message}", path.display())]
    Ingestion {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("target unachievable: {0}")]
    Unachievable(String),

    #[error("eigensolver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("matrix is not symmetric (|a[{row}][{col}] - a[{col}][{row}]| = {gap:e})")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(what: &'static str, value: f64, domain: &'static str) -> Error {
    Error::Domain {
        what,
        value,
        domain,
    }
}
