use thiserror::Error;

pub type Result<T> = std::result::Result<T, IhanError>;

#[derive(Debug, Error)]
pub enum IhanError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value during evaluation: {0}")]
    Evaluation(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("trace does not match patient: {0}")]
    Consistency(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown patient id {0:?}")]
    UnknownPatient(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl IhanError {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        IhanError::Dimension { op, left, right }
    }
}
