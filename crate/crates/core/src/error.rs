use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    Numeric(&'static str),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },
    #[error("sequence of length {requested} exceeds capacity {capacity}")]
    Capacity { requested: usize, capacity: usize },
    #[error("kv cache built for weights {cache} but used with weights {weights}")]
    Staleness { cache: u64, weights: u64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("value {value} of component {component} outside [{min}, {max}]")]
    Range {
        component: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("jacobi iteration did not converge within {max_iters} iterations")]
    ConvergenceFailure {
        max_iters: usize,
        last_state: Vec<u32>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step} (last finite step {last_finite_step:?})")]
    Training {
        step: usize,
        last_finite_step: Option<usize>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Index { .. } => "index",
            Error::Capacity { .. } => "capacity",
            Error::Staleness { .. } => "staleness",
            Error::Format(_) => "format",
            Error::Range { .. } => "range",
            Error::ConvergenceFailure { .. } => "convergence_failure",
            Error::Config(_) => "config",
            Error::Training { .. } => "training",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
