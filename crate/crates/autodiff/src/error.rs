use thiserror::Error;

/// Errors raised while building or differentiating a graph.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = TapeError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TapeError::Shape {
        op,
        detail: detail.into(),
    })
}
