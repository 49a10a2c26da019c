//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model loading, graph construction and analysis.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor container: missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{0}` contains non-finite values")]
    NonFiniteWeight(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("input is empty")]
    InputTooShort,

    #[error("input of {n} tokens exceeds the maximum sequence length {max}")]
    InputTooLong { n: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("symbol `{0}` is not in the vocabulary")]
    UnknownSymbol(String),

    #[error("nucleus parameter p={0} outside (0, 1]")]
    InvalidP(f64),

    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),

    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("edge {0} does not exist in this run")]
    UnknownEdge(String),

    #[error("target size ratio {requested} below the residual floor {floor}")]
    SizeInfeasible { requested: f64, floor: f64 },

    #[error("trace does not fit this run: {0}")]
    TraceMismatch(String),

    #[error("residual edges must not be ablated")]
    ResidualAblationForbidden,

    #[error("distributions are over different vocabularies ({0} vs {1})")]
    VocabMismatch(usize, usize),

    #[error("{0} has zero variance; correlation undefined")]
    DegenerateVariance(&'static str),

    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },

    #[error("container is malformed: {0}")]
    MalformedContainer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
