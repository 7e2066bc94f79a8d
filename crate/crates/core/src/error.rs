use thiserror::Error;

#[derive(Debug, Error)]
pub enum MelaError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset has samples without a global label")]
    MissingLabel,

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("class {0} is not present in the global classifier")]
    MissingClass(usize),

    #[error("class {0} appears more than once in the task")]
    DuplicateClass(usize),

    #[error("label {label} is not in the active set")]
    InactiveLabel { label: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("cluster state has no centroids")]
    EmptyState,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dataset is already rotation-augmented")]
    AlreadyAugmented,

    #[error("linear system could not be solved")]
    Singular,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MelaError>;
