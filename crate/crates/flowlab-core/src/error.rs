//! Error type shared across the core crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Everything that can go wrong inside the numerics, models and training
/// loops. NaN/Inf is always surfaced as an error, never silently propagated.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor shapes incompatible for the named operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// An operation produced a NaN or infinite value.
    NonFinite { op: &'static str },
    /// The ODE solver hit a non-finite state at the given step index.
    NonFiniteState { step: usize },
    /// `backward` called on a node that is not scalar-shaped.
    NonScalarRoot { shape: [usize; 2] },
    /// Two evaluations of a supposedly deterministic loss disagreed.
    NonDeterministicLoss,
    /// A parameter name was registered twice.
    DuplicateParam(String),
    /// Lookup of a parameter name that was never registered.
    UnknownParam(String),
    /// Step count not in the model's supported set.
    UnsupportedStepCount { n: u32, supported: Vec<u32> },
    /// Step-token conditioning requires an inference step count.
    MissingStepCount,
    /// Flow time outside `[0, 1]`.
    TimeOutOfRange(f64),
    /// Condition id outside `0..C`.
    ConditionOutOfRange { id: usize, conditions: usize },
    /// A probability vector was negative or did not sum to one.
    InvalidPrior(String),
    /// Dataset or batch with no samples where at least one is required.
    EmptyBatch,
    /// A configuration value violates its documented invariant.
    InvalidConfig(String),
    /// Training aborted because the loss became non-finite.
    Diverged { iteration: usize },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            CoreError::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            CoreError::NonFiniteState { step } => {
                write!(f, "ODE state became non-finite at step {step}")
            }
            CoreError::NonScalarRoot { shape } => {
                write!(f, "backward requires a scalar root, got {}x{}", shape[0], shape[1])
            }
            CoreError::NonDeterministicLoss => {
                write!(f, "loss function returned different values on repeated evaluation")
            }
            CoreError::DuplicateParam(name) => write!(f, "duplicate parameter name '{name}'"),
            CoreError::UnknownParam(name) => write!(f, "unknown parameter name '{name}'"),
            CoreError::UnsupportedStepCount { n, supported } => {
                write!(f, "step count {n} not in supported set {supported:?}")
            }
            CoreError::MissingStepCount => {
                write!(f, "step-token conditioning requires an inference step count")
            }
            CoreError::TimeOutOfRange(t) => write!(f, "flow time {t} outside [0, 1]"),
            CoreError::ConditionOutOfRange { id, conditions } => {
                write!(f, "condition id {id} outside 0..{conditions}")
            }
            CoreError::InvalidPrior(msg) => write!(f, "invalid prior: {msg}"),
            CoreError::EmptyBatch => write!(f, "empty batch or dataset"),
            CoreError::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            CoreError::Diverged { iteration } => {
                write!(f, "training diverged (non-finite loss) at iteration {iteration}")
            }
        }
    }
}

#[cfg(any(test, feature = "std"))]
impl std::error::Error for CoreError {}
