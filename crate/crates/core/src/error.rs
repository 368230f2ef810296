use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid {what}: {msg}")]
    Invariant { what: &'static str, msg: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("probability mass underflowed to zero at frame {frame}")]
    Underflow { frame: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("phone id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },

    #[error("supervision language is empty")]
    EmptyLanguage,

    #[error("path enumeration exceeded cap of {cap} paths")]
    CapExceeded { cap: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invariant(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Invariant {
            what,
            msg: msg.into(),
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
