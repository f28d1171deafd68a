use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("label {label} at voxel {coord:?} is out of range for {classes} classes")]
    LabelOutOfRange {
        label: usize,
        coord: Vec<usize>,
        classes: usize,
    },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("weight sets are not fusion-compatible: {0}")]
    Incompatible(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    BadVersion {
        path: PathBuf,
        found: u64,
        expected: u64,
    },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("manifest disagrees with payload in {path}: {msg}")]
    ManifestMismatch { path: PathBuf, msg: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the file system rather than of content or arguments.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
