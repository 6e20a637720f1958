use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input outside the mathematical or physical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("no field available for electrode {0}")]
    UnknownElectrode(u32),

    /// The least-squares problem does not constrain some parameter combination.
    #[error("degenerate fit: {0}")]
    Degenerate(String),

    /// Malformed data or configuration file content.
    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
