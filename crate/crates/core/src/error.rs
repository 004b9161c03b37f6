use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for {what} of size {size}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("forward function is not deterministic: {0}")]
    NonDeterministic(String),
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(
        "checkpoint array `{name}` with shape {stored:?} does not fit target shape {target:?}"
    )]
    ShapeExceedsTarget {
        name: String,
        stored: Vec<usize>,
        target: Vec<usize>,
    },
    #[error(
        "checkpoint integrity check failed: stored crc {stored:#010x}, computed {computed:#010x}"
    )]
    Integrity { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("{path}:{line}: {message}")]
    Data {
        path: String,
        line: usize,
        message: String,
    },
    #[error("test undefined: {0}")]
    UndefinedTest(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Short stable identifier, used by the CLI's machine-readable error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Empty(_) => "empty_input",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::OutOfRange { .. } => "out_of_range",
            Error::NonDeterministic(_) => "non_deterministic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::ShapeExceedsTarget { .. } => "shape_exceeds_target",
            Error::Integrity { .. } => "integrity",
            Error::Format(_) => "format",
            Error::Data { .. } => "data",
            Error::UndefinedTest(_) => "undefined_test",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
