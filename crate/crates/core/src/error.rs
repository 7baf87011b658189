use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the estimation and projection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("infeasible split for {context}: in={inflow:.3}, out={outflow:.3}; {advice}")]
    InfeasibleSplit {
        context: String,
        inflow: f64,
        outflow: f64,
        advice: &'static str,
    },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("negative inflow for {context}: {message}; increase the migration multiplier m")]
    NegativeInflow { context: String, message: String },

    #[error("division error: {0}")]
    Division(String),

    #[error("numeric guard: {0}")]
    NumericGuard(String),

    #[error("chain {chain} stuck: no proposal accepted for {iterations} consecutive iterations")]
    StuckChain { chain: usize, iterations: usize },

    #[error("insufficient sample: need at least {needed} draws, got {got}")]
    InsufficientSample { needed: usize, got: usize },

    #[error("unknown location `{0}`")]
    UnknownLocation(String),

    #[error("missing artifact {path}; run `netmig {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse error classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
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

    /// Wrap with location/period context, keeping the inner class.
    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::MissingArtifact { .. } => ErrorClass::Config,
            Error::Parse { .. }
            | Error::Schema(_)
            | Error::Consistency(_)
            | Error::UnknownLocation(_)
            | Error::Io { .. }
            | Error::Csv(_) => ErrorClass::Data,
            Error::InvalidParameter(_)
            | Error::DegenerateSchedule(_)
            | Error::InfeasibleSplit { .. }
            | Error::DegenerateFit(_)
            | Error::NegativeInflow { .. }
            | Error::Division(_)
            | Error::NumericGuard(_)
            | Error::StuckChain { .. }
            | Error::InsufficientSample { .. } => ErrorClass::Numerical,
            Error::Context { source, .. } => source.class(),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
