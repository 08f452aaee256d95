use std::io;

/// Errors produced anywhere in the encryption toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported operation on tape: {0}")]
    UnsupportedOperation(String),

    #[error("incompatible model: {0}")]
    IncompatibleModel(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate value range: {0}")]
    DegenerateRange(String),

    #[error("non-finite loss at step {step}: cipher={cipher_loss} triplet={triplet_loss}")]
    NonFiniteLoss {
        step: usize,
        cipher_loss: f64,
        triplet_loss: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
