use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not compose.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation produced NaN or an infinity.
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    /// The API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("parse error in `{field}`: {message}")]
    Parse { field: &'static str, message: String },

    /// Training diverged; carries the per-epoch losses recorded so far.
    #[error("training diverged at epoch {epoch} (losses so far: {trace:?})")]
    Training { epoch: usize, trace: Vec<f64> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
