use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("{what}: expected length {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("inverted bound on {what}[{index}]: min {min} >= max {max}")]
    InvertedBounds {
        what: &'static str,
        index: usize,
        min: f64,
        max: f64,
    },
    #[error("unknown weight preset {0:?} (expected P1 or P2)")]
    UnknownPreset(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(&'static str),
    #[error("invalid horizon: {0}")]
    InvalidHorizon(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("initial guess has dimension {actual}, problem expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("initial guess contains a non-finite entry at index {0}")]
    NonFiniteGuess(usize),
    #[error("invalid solver options: {0}")]
    InvalidOptions(&'static str),
}

#[derive(Debug, Error)]
pub enum InputError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{path}, line {line}: timestamp {t} precedes previous sample at {prev}")]
    NonMonotoneTime {
        path: PathBuf,
        line: u64,
        t: f64,
        prev: f64,
    },
    #[error("{0}: no samples")]
    Empty(PathBuf),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("log encoding: {0}")]
    Csv(#[from] csv::Error),
}
