use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation was called outside its contract (non-scalar loss, NaN probability, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A parameter or input failed validation.
    #[error("invalid {what}: {reason}")]
    Validation { what: &'static str, reason: String },
    /// A model or encoder configuration cannot be realised for the given geometry.
    #[error("configuration error: {0}")]
    Config(String),
    /// A mixture-of-experts member failed.
    #[error("expert {index} (D={patch_size}): {source}")]
    Expert {
        index: usize,
        patch_size: usize,
        source: Box<Error>,
    },
    /// A non-finite value appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn validation(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            what,
            reason: reason.into(),
        }
    }
}
