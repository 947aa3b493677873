use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate fold {fold}: {reason}")]
    DegenerateFold { fold: usize, reason: String },

    #[error("solver did not converge after {iterations} iterations (KKT residual {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        /// Last accepted iterate.
        iterate: Vec<f64>,
    },

    #[error("objective returned a non-finite value or gradient")]
    InvalidObjective,

    #[error("linear index saturated the link at an iterate")]
    Saturated,

    #[error("unsupported link: {0}")]
    UnsupportedLink(String),

    #[error("outcome incompatible with family: {0}")]
    InvalidOutcome(String),

    #[error("support of size {support} exceeds the {treated} treated observations")]
    OverSaturatedSupport { support: usize, treated: usize },

    #[error("confidence level parameter {0} outside (0, 1)")]
    InvalidLevel(f64),

    #[error("{failed} of {total} replications failed; first failure: {first}")]
    SimulationFailed {
        failed: usize,
        total: usize,
        first: String,
    },
}

impl Error {
    /// Short machine-readable tag for structured error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::DegenerateData(_) => "degenerate-data",
            Error::DegenerateFold { .. } => "degenerate-fold",
            Error::NotConverged { .. } => "not-converged",
            Error::InvalidObjective => "invalid-objective",
            Error::Saturated => "saturated",
            Error::UnsupportedLink(_) => "unsupported-link",
            Error::InvalidOutcome(_) => "invalid-outcome",
            Error::OverSaturatedSupport { .. } => "over-saturated-support",
            Error::InvalidLevel(_) => "invalid-level",
            Error::SimulationFailed { .. } => "simulation-failed",
        }
    }
}
