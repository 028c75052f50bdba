use thiserror::Error;

pub type Result<T> = std::result::Result<T, DqError>;

#[derive(Debug, Error)]
pub enum DqError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("extent of zero in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("cannot split extent {extent} into {slices} slices")]
    InvalidDecomposition { extent: usize, slices: usize },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("code index {index} out of range for {codes} codes")]
    CodeOutOfRange { index: usize, codes: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss is not a scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite {what} detected: {detail}")]
    Divergence { what: String, detail: String },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated input at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
