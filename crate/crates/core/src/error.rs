use thiserror::Error;

use crate::wire::WireError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid split plan: {0}")]
    Plan(String),

    #[error("backward called without a matching forward ({0})")]
    BackwardBeforeForward(String),

    #[error("optimizer step without gradients for {0}")]
    MissingGrads(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: u32, classes: usize },

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    SvdNonConvergence { sweeps: usize, residual: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("performance model: {0}")]
    PerfModel(String),

    #[error(transparent)]
    Wire(#[from] WireError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
