use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("head count {heads} does not divide model width {width}")]
    HeadCount { heads: usize, width: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero-norm vector in cosine similarity ({0})")]
    ZeroNorm(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss([usize; 2]),

    #[error("parameter `{0}` is not part of the recorded graph")]
    Detached(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing stream `{stream}` for record `{record}`")]
    MissingStream { stream: String, record: String },

    #[error("dimension mismatch in stream `{stream}` for record `{record}`: expected {expected}, got {actual}")]
    Dimension {
        stream: String,
        record: String,
        expected: usize,
        actual: usize,
    },

    #[error("unknown stream `{0}`")]
    UnknownStream(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("dangling reference: {0}")]
    Dangling(String),

    #[error("invalid dataset: {0}")]
    Invalid(String),

    #[error("unlabeled set contains ground-truth pair ({query_id}, {image_id})")]
    GroundTruthPair { query_id: String, image_id: String },

    #[error("bad matrix file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("empty environment `{0}`")]
    EmptyEnvironment(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("judge error: {0}")]
    Judge(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

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
    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::HeadCount { .. } => "head_count",
            Error::NonFinite(_) => "non_finite",
            Error::ZeroNorm(_) => "zero_norm",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::Detached(_) => "detached",
            Error::UnknownParam(_) => "unknown_param",
            Error::Config(_) => "config",
            Error::MissingStream { .. } => "missing_stream",
            Error::Dimension { .. } => "dimension",
            Error::UnknownStream(_) => "unknown_stream",
            Error::UnknownId(_) => "unknown_id",
            Error::Dangling(_) => "dangling",
            Error::Invalid(_) => "invalid",
            Error::GroundTruthPair { .. } => "ground_truth_pair",
            Error::Format { .. } => "format",
            Error::EmptyEnvironment(_) => "empty_environment",
            Error::EmptySplit(_) => "empty_split",
            Error::Judge(_) => "judge",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
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

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
