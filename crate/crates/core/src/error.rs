use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected} but got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: coordinate ({x}, {y}) outside the {width}x{height} map")]
    OutOfBounds {
        op: &'static str,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("adam: missing gradient for parameter {0}")]
    MissingGradient(usize),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid architecture: {0}")]
    InvalidConfig(String),

    #[error("degenerate drag pair")]
    DegenerateDrag,

    #[error("no shape detected")]
    NoShapeDetected,
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
