use thiserror::Error;

/// Errors produced anywhere in the inference, policy, stream and benchmark layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("partial run belongs to frame #{run} but frame #{frame} was supplied")]
    FrameMismatch { run: u64, frame: u64 },

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("unsupported {kind} format version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("inconsistent model: {0}")]
    Inconsistent(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
