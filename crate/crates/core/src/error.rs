use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The configuration document could not be parsed; `path` is the offending key path.
    #[error("config parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    /// A parsed value violates a documented invariant.
    #[error("invalid configuration: {0}")]
    Validation(String),

    /// Inconsistent runtime inputs (rates, lengths, channel counts).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("value out of modeled range: {0}")]
    Range(String),

    #[error("size mismatch: {0}")]
    Size(String),

    #[error("unknown channel id {0}")]
    UnknownChannel(u32),

    #[error("filter design error: {0}")]
    Design(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("fit is degenerate: {0}")]
    Degenerate(String),

    #[error("division by zero: {0}")]
    Division(String),

    #[error("lock lost on channel {channel}: {detail}")]
    LockLost { channel: u32, detail: String },

    #[error("interpolation error: {0}")]
    Interpolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Serialize(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Serialize(err.to_string())
    }
}
