use chrono::NaiveDate;

/// Errors returned by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents do not follow the expected layout.
    #[error("format error: {0}")]
    Format(String),
    /// A day's data file is missing or fails its checksum.
    #[error("failed to load {date}: {reason}")]
    Load { date: NaiveDate, reason: String },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    /// A grid or archive violates one of its invariants.
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty range: {0}")]
    EmptyRange(String),
    #[error("no ocean cells in mask")]
    EmptyMask,
    #[error("missing gradient for parameter '{0}'")]
    MissingGrad(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    /// Training produced a non-finite loss; `trace` holds the per-epoch losses seen so far.
    #[error("training diverged at epoch {epoch}: loss trace {trace:?}")]
    Diverged { epoch: usize, trace: Vec<f64> },
    #[error("model '{0}' is not fitted")]
    NotFitted(String),
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
