use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Vector or matrix dimensions do not agree.
    #[error("input shape mismatch: {0}")]
    Shape(String),

    /// Inputs outside the mathematical domain (non-PSD covariance, non-positive scale, ...).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// A gram or innovation matrix could not be factorized even after jitter escalation.
    #[error("ill-conditioned matrix in {context}")]
    Conditioning { context: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The objective became non-finite.
    #[error("non-finite objective ({field}): {message}")]
    Evaluation { field: String, message: String },

    #[error("fit failed after {iterations} iterations: {message}")]
    FitFailure { iterations: usize, message: String },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("root finding did not converge from {} start(s): {starts:?}", starts.len())]
    RootFinding { starts: Vec<Vec<f64>> },

    #[error("eigen decomposition failed for slot {slot}")]
    Eigen { slot: usize },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn conditioning(context: impl Into<String>) -> Self {
        Error::Conditioning { context: context.into() }
    }

    /// Prefixes the context of a conditioning error (e.g. with trial and time step).
    pub(crate) fn annotate(self, prefix: &str) -> Self {
        match self {
            Error::Conditioning { context } => Error::Conditioning { context: format!("{prefix}: {context}") },
            Error::NumericDomain(m) => Error::NumericDomain(format!("{prefix}: {m}")),
            other => other,
        }
    }
}
