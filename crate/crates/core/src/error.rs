use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing images: {}", .0.join(", "))]
    MissingImages(Vec<String>),
    #[error("image decode error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("checksum mismatch for parameter `{0}`")]
    Checksum(String),
    #[error("encoder/decoder pairing error: {0}")]
    Pairing(String),
    #[error("adaptation diverged at outer iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Contract(_) => 3,
            Error::Numeric(_) | Error::Divergence { .. } => 4,
            Error::Io { .. } | Error::MissingImages(_) | Error::Image { .. } => 5,
            Error::Load(_) | Error::Checksum(_) => 6,
            Error::Pairing(_) => 7,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
