use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("Markov chain is reducible: {closed_classes} closed communicating classes")]
    ReducibleChain { closed_classes: usize },

    #[error("stationary distribution did not converge after {sweeps} sweeps (periodic chain?)")]
    NonConvergence { sweeps: usize },

    #[error("singular linear system in exact evaluation")]
    Singular,

    #[error("non-finite state: {0}")]
    NonFinite(String),

    #[error("run blew up after step {last_healthy_step}: |delta| = {delta}")]
    BlowUp { last_healthy_step: usize, delta: f64 },

    #[error("assignment solver cap exceeded: m = {m} > {cap}")]
    SolverCap { m: usize, cap: usize },

    #[error("reference trajectory does not cover t = {t} (ends at {end})")]
    ReferenceCoverage { t: f64, end: f64 },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
