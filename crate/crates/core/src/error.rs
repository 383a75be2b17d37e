use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {reason}")]
    Schema { line: usize, reason: String },

    #[error("corpus {0} contains no conversations")]
    EmptyCorpus(PathBuf),

    #[error("rating {0} outside [1, 5]")]
    RatingOutOfRange(f64),

    #[error("too few eligible conversations to split: {0}")]
    TooFewConversations(usize),

    #[error("invalid strategy set: {0}")]
    InvalidStrategies(String),

    #[error("missing importance for strategy {0}")]
    MissingImportance(String),

    #[error("unknown placeholder {{{{${0}}}}} in template")]
    UnknownPlaceholder(String),

    #[error("malformed template: {0}")]
    Template(String),

    #[error("could not parse planner output: {0}")]
    PlannerParse(String),

    #[error("expected {expected} passages, parsed {got} after {attempts} attempts")]
    NotEnoughPassages {
        expected: usize,
        got: usize,
        attempts: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing passages for strategy {0}")]
    MissingPassages(String),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("provider error: {0}")]
    Provider(String),

    #[error("authentication rejected by provider (status {0})")]
    Auth(u16),

    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: String },

    #[error("scripted mock has no reply left for model {0}")]
    ScriptExhausted(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
