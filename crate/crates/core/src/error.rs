use std::path::PathBuf;

use crate::chem::smiles::SmilesError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op} (node {node}): {detail}")]
    Shape {
        op: &'static str,
        node: usize,
        detail: String,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("unbound leaf `{0}`")]
    UnboundLeaf(String),

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward already executed on this tape; run a fresh forward pass first")]
    BackwardTwice,

    #[error("node {0} does not exist on this tape (backward before forward?)")]
    UnknownNode(usize),

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange { what: String, index: usize, size: usize },

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("parameter `{0}` already registered")]
    DuplicateParam(String),

    #[error("refusing to write frozen tensor `{0}`")]
    FrozenWrite(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unsupported format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Smiles(#[from] SmilesError),

    #[error("invalid molecular graph: {0}")]
    Graph(String),

    #[error("{path}:{line}: malformed record: {reason}")]
    Record { path: PathBuf, line: usize, reason: String },

    #[error("split overlap: property {0} is in both train and test sets")]
    SplitOverlap(usize),

    #[error(
        "insufficient labeled molecules for property {property}: \
         {positives} positives, {negatives} negatives, need {needed} of each"
    )]
    InsufficientLabels {
        property: usize,
        positives: usize,
        negatives: usize,
        needed: usize,
    },

    #[error("dataset: {0}")]
    Data(String),

    #[error("context error: {0}")]
    Context(String),

    #[error("missing Fisher information for penalty mode {0}")]
    MissingFisher(&'static str),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

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

/// Coarse classification used by the command-line layer to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::MissingFisher(_) => ErrorClass::Config,
            Error::NonFinite { .. } | Error::NonFiniteLoss(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
