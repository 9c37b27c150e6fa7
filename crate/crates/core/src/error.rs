use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length {len} exceeds limit {max} ({context})")]
    Length { len: usize, max: usize, context: String },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at record {record}: {msg}")]
    Parse { record: usize, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
