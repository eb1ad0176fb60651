use thiserror::Error;

pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalarLoss(Shape),
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("answer alignment failed: {0}")]
    Alignment(String),
    #[error("answer truncated: needs position {needed} but max_len is {max_len}")]
    AnswerTruncated { needed: usize, max_len: usize },
    #[error("question of {len} tokens does not fit max_len {max_len}")]
    QuestionTooLong { len: usize, max_len: usize },
    #[error("empty question")]
    EmptyQuestion,
    #[error("translation failed for instance {id}: {message}")]
    Provider { id: String, message: String },
    #[error("sequence violates encoder limits: {0}")]
    Sequence(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("all similarity weights are zero")]
    DegenerateWeights,
    #[error("invalid weight for dataset {0}")]
    InvalidWeight(String),
    #[error("no weight for dataset {0}")]
    MissingWeight(String),
    #[error("invalid span ({start}, {end}) for length {len}")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("no valid answer span in the passage segment")]
    NoValidSpan,

    #[error("zero-shot violation: target dataset(s) {0:?} appear in training")]
    ZeroShotViolation(Vec<String>),
    #[error("prediction for unknown id {0}")]
    UnknownId(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: Shape, rhs: Shape) -> Self {
        Error::Shape { op, lhs, rhs }
    }

    pub fn file(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::File {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
