use thiserror::Error;

/// Errors produced by parsing, graph construction, and optimization.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid graph structure: {0}")]
    Structure(String),

    #[error("invalid mixture component: non-positive scaled weight")]
    InvalidComponent,

    #[error("invalid confidence offset: {0}")]
    InvalidOffset(String),

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("frame sequencing error: {0}")]
    Sequencing(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
