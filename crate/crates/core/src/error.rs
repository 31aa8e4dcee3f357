use std::path::PathBuf;

/// Errors produced anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("NaN gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("no forward pass has been recorded")]
    EmptyGraph,

    #[error("unknown token id {0}")]
    UnknownId(u32),

    #[error("token collision: `{0}` already exists in the vocabulary")]
    TokenCollision(String),

    #[error("invalid UTF-8 in {path} at byte offset {offset}")]
    InvalidUtf8 { path: PathBuf, offset: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed {kind} file: {message}")]
    Format { kind: &'static str, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("no training data")]
    NoTrainingData,

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("no layer weights: checkpoint uses the standard residual stream")]
    NoLayerWeights,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
