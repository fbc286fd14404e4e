use std::path::PathBuf;

/// Errors produced anywhere in the merging toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {0}: expected `ESMG`")]
    BadMagic(String),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error("tensor `{name}` has a non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
