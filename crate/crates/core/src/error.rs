use thiserror::Error;

/// Errors raised across the library.
///
/// Every variant maps onto a stable `kind()` string so the CLI can emit a
/// machine-parseable error record.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parameter outside its domain: {0}")]
    ParameterDomain(String),

    #[error("model misspecification: {0}")]
    ModelMisspecification(String),

    #[error("invalid input: {0}")]
    Domain(String),

    #[error("truncation error: {0}")]
    Truncation(String),

    #[error("kernel is reducible: {0}")]
    Reducible(String),

    #[error("power iteration did not converge after {iterations} iterations (left residual {left_residual:e}, right residual {right_residual:e})")]
    NonConvergence {
        iterations: usize,
        left_residual: f64,
        right_residual: f64,
    },

    #[error("spectral oracle failed: {0}")]
    OracleFailure(String),

    #[error("spectral integrity violated: {0}")]
    SpectralIntegrity(String),

    #[error("population exploded past the hard cap {cap} at step {step}")]
    Explosion { cap: u64, step: usize },

    #[error("no surviving trajectory after {attempts} attempts (empirical survival fraction {survival_fraction})")]
    SurvivalRejection {
        attempts: u64,
        survival_fraction: f64,
    },

    #[error("optimizer failed to converge from every start ({starts} starts)")]
    OptimizerNonConvergence { starts: usize },

    #[error("tail truncation: u_z v_z underflows at z = {z}; reduce z_max")]
    TailTruncation { z: usize },

    #[error("identifiability failure: {0}")]
    Identifiability(String),

    #[error("covariance integrity violated: {0}")]
    CovarianceIntegrity(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("batch aborted at replication {replication}: {source}")]
    BatchAborted {
        replication: usize,
        completed: usize,
        source: Box<Error>,
    },

    #[error("study aborted: {failed} of {total} replications failed")]
    StudyAborted { failed: usize, total: usize },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Short stable identifier used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ParameterDomain(_) => "parameter-domain",
            Error::ModelMisspecification(_) => "model-misspecification",
            Error::Domain(_) => "domain",
            Error::Truncation(_) => "truncation",
            Error::Reducible(_) => "reducibility",
            Error::NonConvergence { .. } => "non-convergence",
            Error::OracleFailure(_) => "oracle-failure",
            Error::SpectralIntegrity(_) => "spectral-integrity",
            Error::Explosion { .. } => "explosion",
            Error::SurvivalRejection { .. } => "survival-rejection",
            Error::OptimizerNonConvergence { .. } => "optimizer-non-convergence",
            Error::TailTruncation { .. } => "tail-truncation",
            Error::Identifiability(_) => "identifiability",
            Error::CovarianceIntegrity(_) => "covariance-integrity",
            Error::InsufficientData(_) => "insufficient-data",
            Error::BatchAborted { .. } => "batch-aborted",
            Error::StudyAborted { .. } => "study-aborted",
            Error::Io(_) => "io",
            Error::Parse(_) => "parse",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
