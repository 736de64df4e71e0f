use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
///
/// Variants map one-to-one onto the error classes of the public contracts;
/// the CLI turns them into exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("type error: {0}")]
    Type(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("unknown token `{0}`")]
    Vocab(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("candidate pool error: {0}")]
    Pool(String),

    #[error("negative sampling failed: {0}")]
    Sampling(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
