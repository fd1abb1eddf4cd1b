use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NdtError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: non-finite input value")]
    NonFiniteInput { op: &'static str },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("cosine similarity of a zero-norm vector (degenerate embedding)")]
    ZeroNorm,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("unknown input {0:?}")]
    UnknownInput(String),
}
