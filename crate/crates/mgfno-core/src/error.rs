//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tape already consumed by a backward pass; record a fresh forward pass")]
    TapeConsumed,

    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("non-finite gradient for parameter `{name}` (id {id})")]
    NonFiniteGradient { name: String, id: u32 },

    #[error("inverse transform input violates conjugate symmetry: imaginary residue {residue:.3e} above threshold {threshold:.3e}")]
    ImaginaryResidue { residue: f64, threshold: f64 },

    #[error("solver did not converge after {cycles} cycles (relative residual {final_residual:.3e}); history: {history:?}")]
    SolverStalled {
        cycles: usize,
        final_residual: f64,
        history: Vec<f64>,
    },

    #[error("solution blow-up detected at step {step}: max |u| = {max_abs:.3e}")]
    BlowUp { step: usize, max_abs: f64 },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::ShapeMismatch(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }
}
