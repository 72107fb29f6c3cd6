use thiserror::Error;

/// Errors raised across the pruning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{stage} diverged at step {step}: loss = {loss} (learning rate too high?)")]
    Diverged {
        stage: String,
        step: usize,
        loss: f64,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("pruning plan error: {0}")]
    Plan(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
