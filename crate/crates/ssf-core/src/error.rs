use alloc::string::String;
use core::fmt;

/// Errors raised by the pipeline core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// A caller broke an operation contract (mismatched lengths, wrong
    /// coordinate sets, unsorted bin edges, ...).
    Contract(String),
    /// A non-finite value appeared; carries the layer or op name.
    Numeric(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
