use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: value {value} at index {index} is outside the domain ({reason})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
        reason: &'static str,
    },
    #[error("{op}: label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        op: &'static str,
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("tensor name is not valid UTF-8")]
    Utf8,
    #[error("tensor name {0} is longer than 65535 bytes")]
    NameTooLong(String),
    #[error("tensor {0}: {1}")]
    Tensor(String, TensorError),
}
