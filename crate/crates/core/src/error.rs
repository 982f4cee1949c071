use std::fmt;

/// Errors surfaced by tensor ops, file formats, and the training stack.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    Shape(String),
    /// A configuration value violates a structural constraint.
    Config(String),
    /// Input data is structurally valid but semantically unusable.
    Data(String),
    /// A serialized file is malformed; `offset` is the first bad byte.
    Format { offset: u64, message: String },
    /// The API was called in an unsupported way.
    Usage(String),
    /// A computation produced or detected non-finite values.
    Numeric(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl Error {
    /// Process exit code for CLI reporting: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Shape(_) | Error::Data(_) | Error::Format { .. } | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
