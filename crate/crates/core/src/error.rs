use std::io;

use thiserror::Error;

pub type Result<T, E = HempError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HempError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("index {index} out of range 1..={levels}")]
    IndexOutOfRange { index: u32, levels: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Data(#[from] crate::datasets::DataError),

    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HempError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HempError::InvalidArgument(msg.into())
    }
}
