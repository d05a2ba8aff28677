use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: line {line}: date {date} is not after the previous date")]
    Ordering {
        path: PathBuf,
        line: u64,
        date: NaiveDate,
    },

    #[error("{0}: no data rows")]
    EmptyInput(PathBuf),

    #[error("insufficient curve on {date}: {message}")]
    InsufficientCurve { date: NaiveDate, message: String },

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("optimizer did not converge after {iterations} iterations (best objective {best_value})")]
    Convergence {
        iterations: usize,
        best_value: f64,
        best: Vec<f64>,
    },

    #[error("grid mismatch: {0}")]
    Grid(String),

    #[error("missing market data on {date}: {message}")]
    Gap { date: NaiveDate, message: String },

    #[error("infeasible intrinsic problem: volume bounds violated at prefix {prefix} ({message})")]
    Infeasible { prefix: usize, message: String },

    #[error(
        "model family is empty after {attempts} draws \
         (non-stationary: {non_stationary}, normality: {normality}, likelihood: {likelihood})"
    )]
    FamilyConstruction {
        attempts: usize,
        non_stationary: usize,
        normality: usize,
        likelihood: usize,
    },

    #[error("valuation of family member {member} failed: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Ordering { .. } => "ordering",
            Error::EmptyInput(_) => "empty_input",
            Error::InsufficientCurve { .. } => "insufficient_curve",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::Domain(_) => "domain",
            Error::Singular(_) => "singular",
            Error::Convergence { .. } => "convergence",
            Error::Grid(_) => "grid",
            Error::Gap { .. } => "gap",
            Error::Infeasible { .. } => "infeasible",
            Error::FamilyConstruction { .. } => "family_construction",
            Error::Member { .. } => "member",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}
