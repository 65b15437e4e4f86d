use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed input: empty vectors, bad dimensions, invalid configuration.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor shapes do not conform for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation was evaluated at a pole or produced a non-finite value.
    #[error("numeric domain error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// The transformer pre-logit left the open unit interval.
    #[error("saturation at {location}: |x| = {magnitude:e}")]
    Saturation { location: String, magnitude: f64 },

    /// Bracket expansion during inversion could not enclose the target.
    #[error("range error: y = {target} is outside the numeric range of the transformer (searched |x| <= {limit:e})")]
    Range { target: f64, limit: f64 },

    /// A closure that must be deterministic returned different values.
    #[error("inconsistent closure: {0}")]
    Inconsistent(String),

    /// Parameter update aborted.
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    /// Checkpoint (de)serialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    /// Prefixes the location of a saturation or numeric error, used when an
    /// error propagates from a transformer into a layer or a batch.
    pub fn within(self, context: impl std::fmt::Display) -> Self {
        match self {
            Error::Saturation {
                location,
                magnitude,
            } => Error::Saturation {
                location: format!("{context}, {location}"),
                magnitude,
            },
            Error::Numeric { op, detail } => Error::Numeric {
                op,
                detail: format!("{context}: {detail}"),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
