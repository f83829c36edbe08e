use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at byte offset {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape2(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape {
            op,
            detail: format!("{a:?} vs {b:?}"),
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Range(_) => 2,
            Error::Parse { .. } | Error::Integrity(_) => 3,
            Error::NonFinite(_) => 4,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}
