use thiserror::Error;

use crate::autodiff::Primitive;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: Primitive, left: Vec<usize>, right: Vec<usize> },
    #[error("{0}: produced a non-finite value")]
    NonFinite(Primitive),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is not connected to any leaf that requires a gradient")]
    DetachedLoss,
    #[error("function is not deterministic: two evaluations at the same point disagree")]
    NonDeterministic,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown adapter '{0}'")]
    UnknownAdapter(String),
    #[error("adapter '{0}' already exists")]
    DuplicateAdapter(String),
    #[error("adapter '{0}' is active and cannot be deleted")]
    AdapterActive(String),
    #[error("unknown preset '{name}', expected one of: {valid}")]
    UnknownPreset { name: String, valid: String },
    #[error("unknown head '{0}'")]
    UnknownHead(String),
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("sequence length {len} must be between 1 and {max}")]
    SequenceLength { len: usize, max: usize },
    #[error("adapter-only training requires an active adapter stack with a frozen backbone")]
    NoActiveStack,
    #[error("model mismatch: package was built for model {package} but the live model is {live}")]
    IncompatibleModel { package: String, live: String },
    #[error("configuration conflict: requested {requested} but package holds {found}")]
    ConfigConflict { requested: String, found: String },
    #[error("checksum failure: {0}")]
    Checksum(String),
    #[error("malformed package: {0}")]
    Format(String),
    #[error("archive verification failed: {0}")]
    Verify(String),
    #[error("unknown toy task '{0}', expected one of: majority-token, parity-of-token, copy-first-label")]
    UnknownTask(String),
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("zip archive: {0}")]
    Zip(#[from] zip::result::ZipError),
}

impl Error {
    /// Whether the failure came from the filesystem or transport layer rather than content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
