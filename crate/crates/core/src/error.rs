use thiserror::Error;

/// Errors produced by the numeric core, bottlenecks, models and data pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: input length {len} shorter than kernel {kernel}")]
    LengthTooShort {
        op: &'static str,
        len: usize,
        kernel: usize,
    },
    #[error("{op}: dimension {dim} not divisible by {by}")]
    NotDivisible {
        op: &'static str,
        dim: usize,
        by: usize,
    },
    #[error("attention: empty key/value source")]
    EmptySource,
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cross_entropy: every position is padding, mean undefined")]
    AllPositionsPadded,
    #[error("code {code} out of range for K={max}")]
    CodeOutOfRange { code: u64, max: u64 },
    #[error("slice index {index} out of range for K'={max}")]
    SliceIndexOutOfRange { index: u64, max: u64 },
    #[error("usage stats: empty history")]
    EmptyHistory,
    #[error("vocabulary of {vocab} content tokens too small for {task}")]
    VocabTooSmall { vocab: usize, task: &'static str },
    #[error("sequence of length {len} exceeds max_len {max} (refusing to truncate)")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("decode: need at least one candidate")]
    NoCandidates,
    #[error("{0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
