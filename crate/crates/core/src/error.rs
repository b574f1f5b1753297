use thiserror::Error;

use crate::backend::LayerKey;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trajectory: {0}")]
    Trajectory(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown layer {0} for backend {1}")]
    UnknownLayer(LayerKey, String),

    #[error("first-frame alignment is only defined for spatial self-attention, got {0}")]
    AlignmentUnsupported(LayerKey),

    #[error("backend {0} does not support analytic gradients")]
    NoGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("no valid points to evaluate")]
    NoValidPoints,

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
