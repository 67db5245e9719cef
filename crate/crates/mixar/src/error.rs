//! Error type shared across the library.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by model construction, fitting, simulation and ingestion.
#[derive(Debug, Error)]
pub enum Error {
    /// A window was supplied whose length does not match the expert's lag count.
    #[error("window length {got} does not match lag count {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The series is too short for the requested operation.
    #[error("series too short: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// A non-finite value reached a computation that requires finite input.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A model or configuration violates a structural invariant.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// The simulated recursion left the representable range.
    #[error("simulation diverged at sample index {index} (counting burn-in)")]
    Diverged { index: usize },

    /// Every EM restart failed; carries the first underlying failure.
    #[error("all {restarts} EM restarts failed; first failure: {source}")]
    AllRestartsFailed {
        restarts: usize,
        #[source]
        source: Box<Error>,
    },

    /// A per-order fit inside model selection failed.
    #[error("fit for p = {p} failed: {source}")]
    OrderFit {
        p: usize,
        #[source]
        source: Box<Error>,
    },

    /// A data file could not be read.
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A data file contains a token that is not a finite number.
    #[error("{path}:{line}: cannot parse {token:?} as a finite number")]
    ParseSeries {
        path: PathBuf,
        line: usize,
        token: String,
    },
}

impl Error {
    /// The root cause, unwrapping selection/restart wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::OrderFit { source, .. } => source.root(),
            Error::AllRestartsFailed { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
