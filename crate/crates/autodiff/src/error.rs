use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: index {index} out of range for dimension of size {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("parameter `{0}` registered twice on one tape")]
    DuplicateParam(String),

    #[error("gradient missing for parameter `{0}`")]
    MissingParam(String),

    #[error("gradient given for unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("gradient for `{param}` has shape {got:?}, parameter has {expected:?}")]
    GradShape {
        param: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite gradient for parameter `{param}`; step aborted")]
    NonFiniteGradient { param: String },

    #[error("learning rate must be finite and non-negative, got {0}")]
    InvalidLearningRate(f32),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
