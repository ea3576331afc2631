use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared across the crate. Variants are kept specific enough
/// that callers (and tests) can distinguish failure kinds.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: input outside valid domain: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("{what}: index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("backward() called twice without resetting the tape")]
    BackwardTwice,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter {name} has no gradient")]
    MissingGrad { name: String },

    #[error("IDX file {path}: bad magic {found:#010x}, expected {expected:#010x}")]
    IdxBadMagic {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("IDX file {path}: truncated ({msg})")]
    IdxTruncated { path: String, msg: String },

    #[error("IDX files: image count {images} does not match label count {labels}")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: bad magic {found:?}, expected {expected:?}")]
    CheckpointBadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("checkpoint: unsupported version {found}, expected {expected}")]
    CheckpointBadVersion { found: u32, expected: u32 },

    #[error("checkpoint: truncated file ({msg})")]
    CheckpointTruncated { msg: String },

    #[error("checkpoint: parameter {name} has shape {found:?} but the model expects {expected:?}")]
    CheckpointShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint: {msg}")]
    CheckpointInvalid { msg: String },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("training aborted at iteration {iteration}: {msg}")]
    TrainingAborted { iteration: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
