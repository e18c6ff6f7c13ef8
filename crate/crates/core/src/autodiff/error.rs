use thiserror::Error;

/// Errors raised by tape construction, backward sweeps, and the optimizer.
#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("gradient reversal coefficient must be positive, got {0}")]
    NonPositiveCoefficient(f64),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("optimizer: {0}")]
    Optimizer(String),
}
