use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("non-finite gradient; optimizer step refused")]
    NonFiniteGradient,
    #[error("invalid slate: {0}")]
    InvalidSlate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty batch for {0}")]
    EmptyBatch(&'static str),
    #[error("training diverged at outer iteration {iteration} during {phase}: {detail}")]
    Diverged {
        iteration: usize,
        phase: &'static str,
        detail: String,
    },
}

pub type Result<T> = core::result::Result<T, Error>;
