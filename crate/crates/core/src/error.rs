//! Crate-wide error type.
//!
//! Every fallible path reports a structured variant rather than panicking, so
//! the CLI can serialize failures as machine-readable JSON and batch sweeps
//! can attribute a failure to the offending scenario/timestamp.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix failed the orthonormality check (drift {drift:.3e})")]
    NonOrthonormal { drift: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("non-finite state detected at t = {t:.6} s ({what})")]
    NonFiniteState { t: f64, what: &'static str },

    #[error("invalid time step dt = {dt}: {reason}")]
    InvalidDt { dt: f64, reason: &'static str },

    #[error("foot target out of the leg workspace: reach {reach:.4} m not in [{min:.4}, {max:.4}] m")]
    OutOfWorkspace { reach: f64, min: f64, max: f64 },

    #[error("infeasible gait for {leg} at t = {t:.6} s: {source}")]
    Infeasible {
        t: f64,
        leg: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("innovation covariance ill-conditioned (cond ≈ {cond:.3e}); update skipped")]
    IllConditioned { cond: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty or unusable trajectory: {0}")]
    EmptyTrajectory(&'static str),

    #[error("no timestamp association within {tolerance} s between trajectories")]
    NoAssociation { tolerance: f64 },

    #[error("csv parse error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Attaches a path to an io error (std::io::Error carries none).
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn csv(path: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}
