use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding layer {layer} is not a hidden layer (valid range 1..={max})")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("source neuron {neuron} out of range for layer of width {width}")]
    SourceNeuronOutOfRange { neuron: usize, width: usize },

    #[error("split coefficients sum to {sum}, expected 1")]
    LambdaSum { sum: f64 },

    #[error("composite plan step {index} failed: {source}")]
    PlanStep {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no stationary point reached; best gradient norm {best_norm:e}")]
    NonConvergence { best_norm: f64 },

    #[error("gradient of the grown network stayed at or below {tau:e} after {attempts} draws at width {width}")]
    EmbedEscapeFailure { width: usize, attempts: usize, tau: f64 },

    #[error("risk changed by {gap:e} across growth to width {width}")]
    ContinuityViolation { width: usize, gap: f64 },

    #[error("optimizer: {0}")]
    Optim(#[from] crate::optimizer::OptimError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("benchmark: {0}")]
    Bench(String),

    #[error("model file: {0}")]
    Model(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
