use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer index {index} out of range (model has {n_layers} layers)")]
    LayerIndex { index: usize, n_layers: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("expected exactly one [MASK] token, found {0}")]
    MaskCount(usize),

    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenId { id: usize, vocab: usize },

    #[error("invalid template {template:?}: {reason}")]
    Template { template: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact {path} (run the `{stage}` stage first)")]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
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
