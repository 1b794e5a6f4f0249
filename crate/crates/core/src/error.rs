use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: DType, found: DType },

    #[error("pattern error at column {pos}: {msg}")]
    Pattern { pos: usize, msg: String },

    #[error("rearrange: {0}")]
    Rearrange(String),

    #[error("backward: operation `{0}` has no registered adjoint")]
    UnregisteredOp(&'static str),

    #[error("backward: output must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("resolution {got_h}x{got_w} does not match the model's {want_h}x{want_w}; use the resolution adapter")]
    Resolution {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("weight container: {0}")]
    Container(#[from] ContainerError),

    #[error("image: {0}")]
    Image(#[from] ImageError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ContainerError {
    #[error("bad magic {0:?}, expected \"RFTW\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },

    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),

    #[error("tensor name is not valid UTF-8")]
    InvalidName,

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("tensor `{name}` has unknown dtype code {code}")]
    UnknownDtype { name: String, code: u8 },

    #[error("tensor `{name}` has invalid shape {shape:?}")]
    InvalidShape { name: String, shape: Vec<u64> },

    #[error("name mismatch: missing {missing:?}, extra {extra:?}")]
    NameMismatch { missing: Vec<String>, extra: Vec<String> },

    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{name}` is stored as {found}, model uses {expected}")]
    DtypeMismatch {
        name: String,
        expected: DType,
        found: DType,
    },

    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("unsupported netpbm variant {0} (only binary P6 is read)")]
    UnsupportedVariant(String),

    #[error("unsupported maxval {0} (only 255)")]
    UnsupportedMaxval(u32),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}
