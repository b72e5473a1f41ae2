//! Error type shared across the crate.

use alloc::string::String;

/// Everything that can go wrong in the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A vector or matrix had the wrong size for the operation.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    /// An argument was structurally invalid (bad index, empty input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A simulated trajectory left the representable range.
    #[error("simulation produced a non-finite state at t = {t}")]
    SimulationDiverged { t: f64 },
    /// An implicit integration step did not converge.
    #[error("implicit step {step} failed to converge (residual {residual:e})")]
    StepFailed { step: usize, residual: f64 },
    /// The training loss became non-finite.
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    /// The control planner produced a non-finite cost or gradient.
    #[error("planning produced a non-finite cost")]
    PlanningFailed,
    /// A linear system was numerically singular.
    #[error("singular linear system (pivot {pivot:e})")]
    SingularMatrix { pivot: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
