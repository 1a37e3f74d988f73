use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("power iteration did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("non-finite value encountered{}", match .iteration { Some(t) => format!(" at iteration {t}"), None => String::new() })]
    NonFinite { iteration: Option<usize> },

    #[error("operation requires a softmax classification head")]
    WrongHead,

    #[error("node models have mismatched topologies")]
    TopologyMismatch,

    #[error(
        "inner matrix of node {node} is numerically singular (condition number {condition:e})"
    )]
    SingularInnerMatrix { node: usize, condition: f64 },

    #[error("step sizes violate condition: {0}")]
    InfeasibleStepSizes(String),

    #[error("empirical distributions have different sizes ({left} vs {right})")]
    SizeMismatch { left: usize, right: usize },

    #[error("transport problem with {0} points exceeds the exact-solver limit of 64")]
    TooLarge(usize),

    #[error("layer {layer} has zero spectral norm")]
    ZeroLayer { layer: usize },

    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: needed {needed} bytes, found {found}")]
    TruncatedFile { needed: usize, found: usize },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("value {0} outside the expected pixel range [0, 255]")]
    OutOfRange(f64),

    #[error("insufficient data: need {needed} samples, have {available}")]
    InsufficientData { needed: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
