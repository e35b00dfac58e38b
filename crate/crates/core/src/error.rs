use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data length {actual} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape {0:?}: order and every dimension must be >= 1")]
    InvalidShape(Vec<usize>),

    #[error("{perm:?} is not a permutation of the {order} modes")]
    InvalidModePermutation { perm: Vec<usize>, order: usize },

    #[error("cannot contract mode {mode_a} of a (dim {dim_a}) with mode {mode_b} of b (dim {dim_b})")]
    ContractionMismatch {
        mode_a: usize,
        mode_b: usize,
        dim_a: usize,
        dim_b: usize,
    },

    #[error("invalid contraction modes: {0}")]
    InvalidModes(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid permutation: {0}")]
    Permutation(String),

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("invalid network specification: {0}")]
    Network(String),

    #[error("invalid training configuration: {0}")]
    TrainConfig(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss {loss} at repetition {repetition}, epoch {epoch}")]
    NonFiniteLoss {
        loss: f64,
        repetition: usize,
        epoch: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }
}
