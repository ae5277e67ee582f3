use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("time ordering error: expected t > t_prev, got t = {t}, t_prev = {t_prev}")]
    Ordering { t: f64, t_prev: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("noise level vanishes at t = {t}; epsilon prediction is singular")]
    SingularSigma { t: f64 },

    #[error(
        "infeasible clamp interval at component {index}: gamma1 = {gamma1} < 1 in strict mode"
    )]
    InfeasibleClamp { index: usize, gamma1: f64 },

    #[error(
        "quadrature did not reach tolerance {tolerance:e}: achieved error estimate {estimate:e}"
    )]
    Quadrature { estimate: f64, tolerance: f64 },

    #[error("numeric failure at step {step} (t = {t}): non-finite state")]
    NumericFailure { step: usize, t: f64 },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("incomplete table: {} missing cell(s), first: {}", gaps.len(), gaps.first().map(|g| g.to_string()).unwrap_or_default())]
    IncompleteTable { gaps: Vec<CellId> },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("table schema version {found} is not supported (expected {expected}); upgrade needed")]
    SchemaVersion { found: String, expected: u32 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

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

    pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, got })
        }
    }
}

/// Address of one lookup-table cell.
#[derive(
    Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub struct CellId {
    pub cond_id: String,
    pub t_index: usize,
    pub dim: usize,
}

impl std::fmt::Display for CellId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, t_index={}, dim={})",
            self.cond_id, self.t_index, self.dim
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
