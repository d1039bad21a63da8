use thiserror::Error;

/// Errors raised by the library. Every variant renders as a single line so the
/// CLI can print it verbatim as a machine-parsable diagnostic.
#[derive(Debug, Error)]
pub enum Error {
    #[error("not positive definite: pivot {pivot} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("non-finite ELBO estimate")]
    NonFiniteElbo,

    #[error("optimization diverged at step {step}")]
    Diverged { step: usize },

    #[error("step-size adaptation failed: every warmup transition diverged")]
    AdaptationFailed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported format version {found} (max supported {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("HMC did not converge: max R-hat {rhat:.4} >= {threshold}")]
    NotConverged { rhat: f64, threshold: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::NonFinite(_) => "non_finite",
            Error::NonFiniteElbo => "non_finite_elbo",
            Error::Diverged { .. } => "diverged",
            Error::AdaptationFailed => "adaptation_failed",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Parse { .. } => "parse",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::NotConverged { .. } => "not_converged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
