use crate::dynamics::DynamicsError;
use crate::numkernel::KernelError;

/// Errors from the learning stages, the decoder and the losses.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("history has {got} steps, expected {expected}")]
    WrongHistoryLength { expected: usize, got: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("unknown dataset mode `{0}`")]
    ModeUnknown(String),
    #[error("scene {0} has no ground-truth future")]
    MissingFuture(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

impl ModelError {
    /// True for failures caused by numbers (NaN, singular dynamics) rather
    /// than by malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ModelError::Kernel(KernelError::NonFinite { .. }) | ModelError::Dynamics(_)
        )
    }
}
