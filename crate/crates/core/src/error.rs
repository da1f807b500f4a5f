use thiserror::Error;

/// Errors raised by the learning engine and its oracles.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("non-finite value in term `{term}`")]
    NonFinite { term: String },
    #[error("support of {size} states exceeds the enumeration cap of {cap}")]
    SupportTooLarge { size: u128, cap: usize },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        /// Per-iteration utility values `(L_p, L_q)` collected before giving up.
        trace: Vec<(f64, f64)>,
    },
    #[error("target moments are not realizable: {0}")]
    Infeasible(String),
    #[error("every site is observed, nothing to infer")]
    NothingToInfer,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
