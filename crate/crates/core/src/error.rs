use thiserror::Error;

/// Errors raised anywhere in the fit → divergence → cluster pipeline.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// Caller-supplied arguments violate an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Probability or real argument outside the function's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A missing or non-finite cell in a panel.
    #[error("non-finite value at site {site}, time {time}, variable {variable}")]
    NonFinite { site: usize, time: usize, variable: usize },

    /// Ranks are degenerate because the series is constant.
    #[error("constant series at site `{site}`, variable `{variable}`")]
    ConstantSeries { site: String, variable: String },

    /// Too few exceedances above the conditioning threshold.
    #[error("too few exceedances: {count} (need at least {required})")]
    TooFewExceedances { count: usize, required: usize },

    /// The conditioning series never exceeds the level.
    #[error("no exceedances in conditioning series; result undefined")]
    NoExceedances,

    /// Symmetric positive-(semi)definite factorization failed.
    #[error("matrix `{name}` is not positive definite")]
    NotPositiveDefinite { name: String },

    /// The optimizer did not converge in any restart.
    #[error("optimizer did not converge; best parameters {best_params:?} with objective {best_value}")]
    NoConvergence { best_params: Vec<f64>, best_value: f64 },

    /// Two artifacts that must agree (thresholds, fingerprints, site sets) do not.
    #[error("contract violation: {0}")]
    Contract(String),

    /// More than half of the bootstrap replicates failed.
    #[error("{failed} of {total} bootstrap replicates failed")]
    BootstrapFailed { failed: usize, total: usize },

    /// Malformed input file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Data problems are distinguished from numerical failures for exit codes.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::NoConvergence { .. } | Error::BootstrapFailed { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
