use kt_engine::EngineError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, KtError>;

#[derive(Debug, Error)]
pub enum KtError {
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),

    #[error("line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("causality violation: {0}")]
    Causality(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("test data leaked into training statistics: {0}")]
    Leakage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Engine(#[from] EngineError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
