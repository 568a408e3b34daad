use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty file: {0}")]
    EmptyFile(PathBuf),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: {message}")]
    InvalidValue {
        row: usize,
        column: String,
        message: String,
    },

    #[error("unknown group label `{label}` at row {row}")]
    UnknownGroup { row: usize, label: String },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("matrix `{0}` is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("laplace fit did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    LaplaceNonConvergence { iterations: usize, grad_norm: f64 },

    #[error("target density is not finite at the initial point")]
    NonFiniteInit,

    #[error("all incremental weights underflowed at step {step}; accumulate weights in log space")]
    WeightUnderflow { step: usize },

    #[error("pattern {pattern} observed {observed} times but has zero model probability")]
    ZeroPatternProbability { pattern: usize, observed: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
