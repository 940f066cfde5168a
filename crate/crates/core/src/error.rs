use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: {detail}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        detail: String,
    },

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown tape node {0}")]
    UnknownNode(usize),

    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarTarget(Vec<usize>),

    #[error("input resolution {height}x{width} is not divisible by {divisor} (required by {levels} pooling levels)")]
    Resolution {
        height: usize,
        width: usize,
        divisor: usize,
        levels: usize,
    },

    #[error("unknown capture layer `{name}` (valid: {valid})")]
    UnknownLayer { name: String, valid: String },

    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("pixel set out of bounds: {0}")]
    PixelSet(String),

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported format version {0}")]
    Version(u16),

    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("parameter `{name}` shape mismatch: file has {found:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            dim,
            detail: detail.into(),
        }
    }

    pub fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the file system rather than by content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
