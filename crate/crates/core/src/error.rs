use std::path::PathBuf;

/// Errors raised anywhere in the factorization and analysis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerics error: {0}")]
    Numerics(String),
    #[error("layer plan error: {0}")]
    Plan(String),
    #[error("orthogonalization error: {0}")]
    Ortho(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("path error: {0}")]
    Path(String),
    #[error("chain error: {0}")]
    Chain(String),
    #[error("pairing error: {0}")]
    Pair(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted at iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration or input files
    /// rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Schema(_) | Error::Data(_) | Error::Graph(_) | Error::Config(_) | Error::Plan(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
