use thiserror::Error;

/// Errors produced by the medication recommendation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("cohort file contains no records")]
    EmptyCohort,

    #[error("index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("unknown {kind} code `{code}`")]
    UnknownCode { kind: &'static str, code: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty medication set")]
    EmptySet,

    #[error("visit has no diagnoses")]
    NoDiagnoses,

    #[error("node {0} is not part of the subgraph")]
    NodeNotInSubgraph(usize),

    #[error("no candidates to choose from")]
    NoCandidates,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged in stage {stage} at epoch {epoch}: {detail}")]
    Diverged {
        stage: u8,
        epoch: usize,
        detail: String,
    },

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
