use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid contract: {0}")]
    Contract(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("belief update is inconsistent: prior mean {prior_mean} with zero variance cannot absorb exact signal {signal}")]
    InconsistentBelief { prior_mean: f64, signal: f64 },

    #[error("panels are misaligned: {0}")]
    Alignment(String),

    #[error("design matrix is rank deficient (collinear column: {column})")]
    RankDeficient { column: String },

    #[error("IRLS did not converge after {iterations} iterations (deviance trace: {trace:?})")]
    NonConvergence { iterations: usize, trace: Vec<f64> },

    #[error("invalid configuration at {location}: {message}")]
    Config { location: String, message: String },

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::Calibration(_) => "calibration",
            Error::InconsistentBelief { .. } => "belief",
            Error::Alignment(_) => "alignment",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Config { .. } => "config",
            Error::FileNotFound(_) => "file_not_found",
            Error::Input(_) => "input",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
