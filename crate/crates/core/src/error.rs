use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate reflected signal on receiver {receiver}: |eta|^2 = {norm_sq:e}")]
    DegenerateSignal { receiver: usize, norm_sq: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no forward cache; call forward before backward")]
    MissingCache,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("episode already finished; call reset")]
    EpisodeFinished,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("model is not trained")]
    Untrained,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
