use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("basis index {0} is not part of the basis")]
    UnknownIndex(String),

    #[error("derivative order {0} is not supported (total order must be at most 2)")]
    UnsupportedOrder(usize),

    #[error("truncation level {requested} exceeds the current level {available}")]
    Range { requested: usize, available: usize },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("gradients are not available for the {0} prior family")]
    UnsupportedFamily(String),

    #[error("threshold map is active (|A(x)| = {norm:.3e} > {lambda_max:.3e}); gradient unavailable")]
    ThresholdGradient { norm: f64, lambda_max: f64 },

    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),

    #[error("functional is not linear: {0}")]
    Linearity(String),

    #[error("conditioning failed: Gram matrix of size {size} is not positive definite (condition estimate {condition_estimate:.3e})")]
    Conditioning { size: usize, condition_estimate: f64 },

    #[error("optimization did not converge; best risk {best_risk:.6e}")]
    Optimization { best_risk: f64, best_knots: Vec<f64> },

    #[error("evidence unavailable: ensemble at rung {rung} failed")]
    EvidenceUnavailable { rung: usize },

    #[error("estimates were computed against different information ({0:#x} vs {1:#x})")]
    Comparison(u64, u64),

    #[error("pipeline structure error: {0}")]
    Structure(String),

    #[error("method {method} cannot consume a distributional input in analytic mode; use ancestral mode")]
    Mode { method: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("config line {line}, column {column}: {message}")]
    Config {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("sampler failed: ensemble collapsed at rung {rung}")]
    SamplerFailed { rung: usize },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit status for the command-line runner: 2 for configuration
    /// problems, 3 for sampler failures, 4 for numerical breakdowns.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SamplerFailed { .. } | Error::EvidenceUnavailable { .. } => 3,
            Error::Conditioning { .. } | Error::Optimization { .. } | Error::ThresholdGradient { .. } => 4,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field: field.to_string(),
        reason: reason.into(),
    }
}
