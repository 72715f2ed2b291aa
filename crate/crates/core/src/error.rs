use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),

    #[error("configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),

    #[error("dictionary is empty")]
    EmptyDictionary,

    #[error("invalid span {start}..={end} in sentence {sentence_id:?}: {reason}")]
    InvalidSpan {
        sentence_id: String,
        start: usize,
        end: usize,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// Attach a file path to an error raised while processing that file.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Error::Stream(source) => Error::Io {
                path: path.into(),
                source,
            },
            other => Error::File {
                path: path.into(),
                source: Box::new(other),
            },
        }
    }
}
