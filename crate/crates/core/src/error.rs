//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument `{field}`: {reason}")]
    InvalidArgument { field: String, reason: String },

    /// Tensor or batch shapes do not line up.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// Task schedule cannot be built from the available classes.
    #[error("insufficient classes: need {needed}, have {available}")]
    InsufficientClasses { needed: usize, available: usize },

    /// Memory budget cannot give every seen class at least one slot.
    #[error("memory budget {budget} too small for {classes} classes")]
    BudgetTooSmall { budget: usize, classes: usize },

    /// A memory operation would overflow a per-class quota.
    #[error("quota exceeded for class {class}: {count} > {quota}")]
    QuotaExceeded {
        class: usize,
        count: usize,
        quota: usize,
    },

    /// Requested class has no representation in the shared model.
    #[error("class {class} not represented in shared model")]
    UnknownClass { class: usize },

    /// Aggregation was asked to combine nothing.
    #[error("cannot aggregate an empty update list")]
    EmptyAggregation,

    /// A condensed exemplar was offered to an update that accepts real images only.
    #[error("condensed exemplar leaked into a real-image-only update")]
    CondensedLeak,

    /// A client has neither current-task data nor replay memory.
    #[error("client {client} has no data and no memory; skipping")]
    ClientSkip { client: usize },

    /// Malformed on-disk or wire payload.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
