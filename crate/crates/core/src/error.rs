use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {0:?} has a zero-sized dimension")]
    ZeroDim(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Self::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Self::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid {field}: {msg}")]
    Invalid { field: &'static str, msg: String },
}

impl ConfigError {
    pub(crate) fn invalid(field: &'static str, msg: impl Into<String>) -> Self {
        Self::Invalid {
            field,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("dataset has {0} instances; at least 2 are needed to form negatives")]
    TooFewInstances(usize),
    #[error("batch size {batch_size} cannot hold a flipped duplicate pair at fraction {fraction}")]
    BatchTooSmall { batch_size: usize, fraction: f64 },
    #[error("category {0} has fewer than 2 instances and cannot form a group")]
    SingletonCategory(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("k = {k} exceeds index size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("query dimension {query} does not match index dimension {index}")]
    DimMismatch { query: usize, index: usize },
    #[error("duplicate photo id {0}")]
    DuplicateId(u64),
    #[error("mirror map is not symmetric at id {0}")]
    AsymmetricMirrorMap(u64),
    #[error("no mirror map: flip confusion is unavailable")]
    MissingMirrorMap,
    #[error("empty result set")]
    EmptyResults,
    #[error("baseline error count must be positive")]
    ZeroBaseline,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Crate-wide error for the orchestration layers (training, evaluation, IO).
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("sampling: {0}")]
    Sampling(#[from] SamplingError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("format: {0}")]
    Format(#[from] FormatError),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("mismatch: {0}")]
    Mismatch(String),
}

impl Error {
    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Sampling(_) => "sampling",
            Error::Retrieval(_) => "retrieval",
            Error::Format(_) => "format",
            Error::Diverged { .. } => "diverged",
            Error::Mismatch(_) => "mismatch",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
