use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("command {command} m/s^2 exceeds the bound {u_max} m/s^2")]
    RejectedInput { command: f64, u_max: f64 },

    #[error("episode finished after {steps} steps; call reset first")]
    EpisodeFinished { steps: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch statistics need at least 2 samples, got {0}")]
    Statistics(usize),

    #[error("backward called without a cached forward pass")]
    NoForwardCache,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        checkpoint: Box<crate::nn::Mlp>,
    },

    #[error("enumeration needs {required} sequences, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("replay buffer holds {len} transitions, batch needs {batch}")]
    InsufficientBuffer { len: usize, batch: usize },

    #[error("no policy adapter from case {from} to case {to}")]
    UnsupportedTransfer { from: u8, to: u8 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::RejectedInput { .. } => "rejected_input",
            Error::EpisodeFinished { .. } => "episode_finished",
            Error::Shape(_) => "shape",
            Error::Statistics(_) => "statistics",
            Error::NoForwardCache => "no_forward_cache",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::BudgetExceeded { .. } => "budget_exceeded",
            Error::InsufficientBuffer { .. } => "insufficient_buffer",
            Error::UnsupportedTransfer { .. } => "unsupported_transfer",
            Error::Parse { .. } => "parse",
            Error::LengthMismatch(_) => "length_mismatch",
            Error::MissingInput(_) => "missing_input",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
