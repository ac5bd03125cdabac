use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("length {len} is not a multiple of chunk size {chunk}")]
    NotChunkAligned { len: usize, chunk: usize },
    #[error("neighbor batch has {got} chunks, decoder input has {expected}")]
    MisalignedNeighbors { expected: usize, got: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("peft: {0}")]
    Peft(String),
    #[error("document is empty")]
    EmptyDocument,
    #[error("embedding dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("metric `{metric}` does not apply to task `{task}`")]
    MetricMismatch { metric: String, task: String },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("base checkpoint hash mismatch: expected {expected}, found {found}")]
    BaseHashMismatch { expected: String, found: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
