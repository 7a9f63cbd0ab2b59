use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("coefficient lattice mismatch: order {left_order}/dim {left_dim} vs order {right_order}/dim {right_dim}")]
    LatticeMismatch {
        left_order: usize,
        left_dim: usize,
        right_order: usize,
        right_dim: usize,
    },

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("trajectory needs at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("timestamps must be strictly increasing (sample {index}: {prev} -> {next})")]
    TimeRegression { index: usize, prev: f64, next: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("demonstration set is empty")]
    EmptySet,

    #[error("{mode} fusion requires at least one {label} demonstration")]
    MissingLabel { mode: &'static str, label: &'static str },

    #[error("point {0:?} lies outside the task domain")]
    OutsideDomain(Vec<f64>),

    #[error("integration diverged (non-finite state)")]
    IntegrationDiverged,

    #[error("invalid time step {0}")]
    InvalidTimeStep(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("expected a {expected} trajectory, got {got}")]
    WrongSystem { expected: String, got: String },

    #[error("degenerate workspace")]
    DegenerateWorkspace,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown system tag {0:?}")]
    UnknownSystem(String),

    #[error("demonstration generation failed: {0}")]
    Generation(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
