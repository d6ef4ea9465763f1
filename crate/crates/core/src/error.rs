use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("integration overflow: {0}")]
    IntegrationOverflow(String),

    #[error("dynamics error: {0}")]
    Dynamics(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("Q_uu + mu I is not positive definite at step {0}")]
    NotPositiveDefinite(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
