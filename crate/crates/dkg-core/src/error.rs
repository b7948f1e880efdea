use thiserror::Error;

/// Errors surfaced by model construction, acquisition evaluation and the
/// optimization loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A caller-side contract was violated (non-unit direction, point outside
    /// the domain, empty batch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The observed-channel Gram matrix stayed non positive definite through
    /// the whole jitter ladder. `record` is the history index whose channel
    /// block made the factorization fail.
    #[error("singular model covariance after jitter escalation (history record {record})")]
    SingularModel { record: usize },

    /// The fantasy covariance of a candidate batch stayed singular through
    /// the jitter ladder. `point` indexes the offending batch point.
    #[error("singular fantasy covariance after jitter escalation (batch point {point})")]
    SingularFantasy { point: usize },

    #[error("objective evaluation failed: {0}")]
    Evaluation(String),

    #[error("hyperparameter sampler failed to initialize: {0}")]
    SamplerInit(String),
}

pub type Result<T> = std::result::Result<T, Error>;
