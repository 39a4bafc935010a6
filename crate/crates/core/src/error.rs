use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("claim {claim:?} references unknown explanation {explanation:?}")]
    DanglingReference { claim: String, explanation: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty index")]
    EmptyIndex,

    #[error("insufficient calibration data: need at least {needed}, got {got}")]
    InsufficientCalibration { needed: usize, got: usize },

    #[error("explanation {0:?} not present in index")]
    MissingFromIndex(String),

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("external service error: {0}")]
    External(String),

    #[error("item {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }

    pub(crate) fn at(index: usize, source: Error) -> Self {
        Error::AtIndex {
            index,
            source: Box::new(source),
        }
    }
}
