use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("matmul inner extents differ: {lhs:?} x {rhs:?}")]
    InnerDim { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss tensor is not tracked on this tape")]
    UntrackedLoss,
    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("discretization step must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("operation requires a time-invariant core")]
    SelectiveModeUnsupported,
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("probabilities not normalized: sum = {0}")]
    NotNormalized(f64),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("unknown corruption kind: {0}")]
    UnknownCorruption(String),
    #[error("adaptation diverged: non-finite loss at batch {batch}, permutation {permutation}")]
    Diverged { batch: usize, permutation: String },
    #[error("frozen parameter {0} changed during adaptation")]
    FrozenParamChanged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
