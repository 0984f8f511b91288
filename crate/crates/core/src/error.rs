use thiserror::Error;

/// Errors raised while building, fitting or summarizing a multiple index model.
#[derive(Debug, Error)]
pub enum BmimError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid index structure: {0}")]
    Structure(String),

    #[error("invalid prior specification: {0}")]
    Prior(String),

    #[error("support violation: {0}")]
    Support(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("sampler aborted: {0}")]
    Sampler(String),

    #[error("invalid request: {0}")]
    Request(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BmimError>;

impl BmimError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        BmimError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
