use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] resdgp::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("no usable records: {rejected_poles} rows rejected at the poles")]
    NoRecords { rejected_poles: usize },

    #[error("acquisition value not finite at iteration {iteration}; best-so-far trace {trace:?}")]
    NonFiniteAcquisition { iteration: usize, trace: Vec<f64> },

    #[error("serialisation: {0}")]
    Serialize(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
