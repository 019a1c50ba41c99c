use thiserror::Error;

/// Errors produced by model construction, analysis and simulation.
#[derive(Debug, Error)]
pub enum UrnError {
    #[error("invalid weight function: {0}")]
    InvalidWeight(String),

    #[error("invalid replacement matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("degenerate weight: S_w = {0:e} is below the underflow floor")]
    DegenerateWeight(f64),

    #[error("zero denominator: w(1/k) = 0")]
    ZeroDenominator,

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),

    #[error("Lyapunov unstable: rho <= 1/2 (min real part of spectrum {0:e})")]
    LyapunovUnstable(f64),

    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("matrix exponential overflow (norm {0:e})")]
    Overflow(f64),

    #[error("replica {replica} (seed {seed}) failed: {source}")]
    Replica {
        replica: u64,
        seed: u64,
        #[source]
        source: Box<UrnError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl UrnError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        UrnError::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, UrnError>;
