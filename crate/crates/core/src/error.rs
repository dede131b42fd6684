use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the engine.
#[derive(Debug)]
pub enum Error {
    /// An operator received operands whose shapes do not conform.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A value or configuration violated a documented precondition.
    Invalid(String),
    /// A trainable parameter reached the optimizer without a gradient.
    MissingGradient(String),
    /// A named parameter was not found in a store or checkpoint.
    MissingParameter(String),
    /// A token outside the closed vocabulary.
    UnknownToken(String),
    /// A binary file did not match its declared layout.
    Format(String),
    Io(io::Error),
    Json(serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for failures caused by the filesystem rather than by inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::Invalid(msg) => write!(f, "invalid input: {msg}"),
            Error::MissingGradient(name) => write!(f, "no gradient for trainable parameter `{name}`"),
            Error::MissingParameter(name) => write!(f, "missing parameter `{name}`"),
            Error::UnknownToken(tok) => write!(f, "token `{tok}` is not in the vocabulary"),
            Error::Format(msg) => write!(f, "malformed file: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
            Error::Json(err) => write!(f, "json error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            Error::Json(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        if err.is_io() {
            Error::Io(err.into())
        } else {
            Error::Json(err)
        }
    }
}
