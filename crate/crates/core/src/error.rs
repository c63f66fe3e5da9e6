use std::fmt;

/// Error type shared by all engine modules.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes incompatible for the requested operation.
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    /// Token id outside the vocabulary, or unknown token string.
    Vocab(String),
    /// Position index exceeds the model's maximum.
    PositionOverflow { position: usize, max: usize },
    /// Malformed or incompatible checkpoint.
    Checkpoint(String),
    /// Invalid configuration value.
    Config(String),
    /// Corpus / file-format problem (line counts, empty inputs, parse failures).
    Corpus(String),
    /// Training diverged or hit an unusable state.
    Train(String),
    /// Decoding precondition violated.
    Decode(String),
    /// Underlying I/O failure.
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::Vocab(m) => write!(f, "vocab: {m}"),
            Error::PositionOverflow { position, max } => {
                write!(f, "position {position} exceeds max-position {max}")
            }
            Error::Checkpoint(m) => write!(f, "checkpoint: {m}"),
            Error::Config(m) => write!(f, "config: {m}"),
            Error::Corpus(m) => write!(f, "corpus: {m}"),
            Error::Train(m) => write!(f, "train: {m}"),
            Error::Decode(m) => write!(f, "decode: {m}"),
            Error::Io(m) => write!(f, "io: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
