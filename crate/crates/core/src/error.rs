use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse error at {location}: {message}")]
    ManifestParse { location: String, message: String },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("unknown split token `{0}` (expected train, val or test)")]
    UnknownSplit(String),

    #[error("attribute `{0}` has no samples in the training split")]
    AttributeWithoutTrainSamples(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown vocabulary word `{0}`")]
    UnknownVocabulary(String),

    #[error("text `{0}` embeds to the zero vector")]
    ZeroEmbedding(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("empty group `{0}`")]
    EmptyGroup(String),

    #[error("group `{0}` is missing from the training counts")]
    MissingTrainGroup(String),

    #[error("training diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    #[error("mixture fit failed: {0}")]
    Mixture(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("binary container error: {0}")]
    Container(String),

    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema validation failed: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::ManifestParse { .. } => "manifest_parse",
            Error::DuplicateId(_) => "duplicate_id",
            Error::UnknownSplit(_) => "unknown_split",
            Error::AttributeWithoutTrainSamples(_) => "attribute_without_train_samples",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnknownVocabulary(_) => "unknown_vocabulary",
            Error::ZeroEmbedding(_) => "zero_embedding",
            Error::EmptySet(_) => "empty_set",
            Error::EmptyGroup(_) => "empty_group",
            Error::MissingTrainGroup(_) => "missing_train_group",
            Error::Divergence { .. } => "divergence",
            Error::Mixture(_) => "mixture",
            Error::Provider(_) => "provider",
            Error::Unsupported(_) => "unsupported",
            Error::Container(_) => "container",
            Error::Png { .. } => "png",
            Error::Json(_) => "json",
            Error::Schema(_) => "schema",
            Error::Config(_) => "config",
        }
    }
}
