use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data integrity error in story `{story_id}`: {reason}")]
    DataIntegrity { story_id: String, reason: String },

    #[error("lookup error: token id {id} outside closed vocabulary of size {vocab_size}")]
    Lookup { id: u32, vocab_size: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error(
        "config hash mismatch: snapshot was written for {found}, current config is {expected}"
    )]
    HashMismatch { expected: String, found: String },

    #[error("non-finite loss `{name}` at step {step}; diagnostic snapshot at {snapshot}")]
    NonFinite {
        name: String,
        step: u64,
        snapshot: String,
    },

    #[error("missing metric model `{0}`")]
    MissingModel(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
