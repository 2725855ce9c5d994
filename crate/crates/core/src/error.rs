use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("point {0} is isolated (kernel row sum is zero)")]
    IsolatedPoint(usize),

    #[error("non-finite state at integration step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },

    #[error("transport: {0}")]
    Transport(String),

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("no data rows")]
    NoData,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Param(msg.into()))
}
