use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: spatial dimensions must be even, got {h}x{w}")]
    OddDimension { op: &'static str, h: usize, w: usize },

    #[error("input size {h}x{w} is not a multiple of {multiple} (required by a network with {levels} downsampling levels)")]
    NotDivisible {
        h: usize,
        w: usize,
        multiple: usize,
        levels: usize,
    },

    #[error("backward requires a scalar root, got {0} elements")]
    NonScalarRoot(usize),

    #[error("stepsize must be positive and finite, got {0}")]
    InvalidStepsize(f64),

    #[error("flow field contains a non-finite value at element {0}")]
    NonFiniteFlow(usize),

    #[error("codelengths violate the Kraft inequality: sum of 2^-len = {0}")]
    Kraft(f64),

    #[error("truncated bitstream: needed a byte at offset {offset}")]
    TruncatedStream { offset: usize },

    #[error("malformed bitstream: {0}")]
    Malformed(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("external codec: {0}")]
    External(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("{what}: expected {expected} channels, got {found}")]
    ChannelMismatch { what: &'static str, expected: usize, found: usize },

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
