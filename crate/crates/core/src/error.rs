use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    InvalidBox([f64; 4]),
    InvalidGrid(&'static str),
    /// Tensor shapes disagree at the named graph node.
    Shape { node: String, detail: String },
    UnknownName(String),
    MissingInput(String),
    NotScalar(Vec<usize>),
    InvalidArgument(String),
    OutOfRange { what: &'static str, value: i64 },
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidBox(b) => write!(f, "invalid box {:?}: needs x_min < x_max and y_min < y_max", b),
            Error::InvalidGrid(msg) => write!(f, "invalid grid: {msg}"),
            Error::Shape { node, detail } => write!(f, "shape mismatch at node `{node}`: {detail}"),
            Error::UnknownName(n) => write!(f, "unknown name `{n}`"),
            Error::MissingInput(n) => write!(f, "missing value for input `{n}`"),
            Error::NotScalar(s) => write!(f, "expected a scalar output, got shape {s:?}"),
            Error::InvalidArgument(msg) => f.write_str(msg),
            Error::OutOfRange { what, value } => write!(f, "{what} out of range: {value}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
