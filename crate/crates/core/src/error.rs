use robustsim_autodiff::TapeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("cannot normalize a zero-norm embedding")]
    ZeroNorm,
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
