use std::io;

use thiserror::Error;

/// Errors raised anywhere in the segmentation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{entry}: spatial extent {extent} cannot be halved (extents must be even or already 1)")]
    Divisibility { entry: String, extent: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("unknown network `{0}` (expected raunet1, raunet2 or raunet_brain, optionally suffixed -d<divisor>)")]
    UnknownNetwork(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
