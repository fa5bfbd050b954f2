//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by the forecasting core.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor operation received incompatible shapes. Names the operation and
    /// the offending shapes.
    ShapeMismatch { op: &'static str, detail: String },
    /// A configuration value is outside its legal range.
    InvalidConfig { what: String },
    /// An input series is too short for the requested transform.
    SeriesTooShort {
        context: String,
        needed: usize,
        got: usize,
    },
    /// A precondition on operation arguments failed.
    InvalidArgument { what: String },
    /// Training loss stopped being finite.
    Diverged { epoch: usize, detail: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in `{op}`: {detail}")
            }
            CoreError::InvalidConfig { what } => write!(f, "invalid configuration: {what}"),
            CoreError::SeriesTooShort {
                context,
                needed,
                got,
            } => write!(
                f,
                "series too short for {context}: need at least {needed} points, got {got}"
            ),
            CoreError::InvalidArgument { what } => write!(f, "invalid argument: {what}"),
            CoreError::Diverged { epoch, detail } => {
                write!(f, "training diverged at epoch {epoch}: {detail}")
            }
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
