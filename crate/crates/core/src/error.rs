use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("cross entropy: row {row} targets masked class {class}")]
    TargetMasked { row: usize, class: usize },

    #[error("cross entropy: every class of row {row} is masked")]
    AllMasked { row: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: graph was already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("id {id} out of range for {table} of size {size}")]
    IdOutOfRange {
        table: &'static str,
        id: usize,
        size: usize,
    },

    #[error("schema violation in {path}: {field}")]
    Schema { path: String, field: String },

    #[error("unknown relation type {0:?}")]
    UnknownRelation(String),

    #[error("invalid relation ({x}, {y}) in dialogue {dialogue}: {reason}")]
    InvalidRelation {
        dialogue: String,
        x: usize,
        y: usize,
        reason: &'static str,
    },

    #[error("answer mismatch for {qa_id}: context at {start} reads {found:?}, expected {expected:?}")]
    AnswerMismatch {
        qa_id: String,
        start: usize,
        expected: String,
        found: String,
    },

    #[error("dialogue {dialogue} has {count} utterances, more than the limit of {limit}")]
    TooManyUtterances {
        dialogue: String,
        count: usize,
        limit: usize,
    },

    #[error("question {qa_id} needs {needed} tokens but the sequence budget is {budget}")]
    QuestionTooLong {
        qa_id: String,
        needed: usize,
        budget: usize,
    },

    #[error("relation head is the root; relation logits are undefined there")]
    RootRelation,

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("missing prediction for {0}")]
    MissingPrediction(String),

    #[error("unknown dialogue id {0}")]
    UnknownDialogue(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
