use thiserror::Error;

/// Crate-wide error type. Variants name the offending dimension or field so
/// callers can report precisely what went wrong.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} is {got}, expected {expected}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{op}: {what}")]
    Invalid { op: &'static str, what: String },
    #[error("non-finite value in {what} (parameter `{name}`)")]
    NonFinite { what: &'static str, name: String },
    #[error("unknown {kind} `{name}`; known: {known}")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("{path}: {what} at byte offset {offset}")]
    Format {
        path: String,
        what: String,
        offset: u64,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(op: &'static str, what: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            what: what.into(),
        }
    }
}
