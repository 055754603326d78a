use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("duplicate identifier {0:?}")]
    DuplicateId(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("spot {spot:?} has all-zero counts")]
    EmptyRow { spot: usize },
    #[error("dataset has no protein measurements")]
    ProteinMissing,
    #[error("genes missing from dataset: {}", .0.join(", "))]
    GeneMissing(Vec<String>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("eigendecomposition failed to converge")]
    RankDeficient,
    #[error("k = {k} must be smaller than the number of nodes ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),
    #[error("attention coefficients do not match the graph: {0}")]
    AlphaMismatch(String),
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint checksum error: {0}")]
    Checksum(String),
    #[error("checkpoint manifest error: {0}")]
    Manifest(String),
    #[error("mixture component {component} collapsed")]
    DegenerateCluster { component: usize },
    #[error("label sequences differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("nothing to evaluate: supply matrices, labels, or both")]
    NothingToEvaluate,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
