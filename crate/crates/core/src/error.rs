use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument fell outside the domain of the operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid utility parameters: {0}")]
    InvalidUtility(String),

    #[error("invalid allocation problem: {0}")]
    InvalidProblem(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    /// Price search could not bracket or converge.
    #[error(
        "solver failure: {reason} (p_lo={p_lo:e}, p_hi={p_hi:e}, excess_lo={excess_lo:e}, excess_hi={excess_hi:e})"
    )]
    SolverFailure {
        reason: String,
        p_lo: f64,
        p_hi: f64,
        excess_lo: f64,
        excess_hi: f64,
    },

    #[error("unsupported oracle instance: {0}")]
    UnsupportedSize(String),
}

impl Error {
    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
