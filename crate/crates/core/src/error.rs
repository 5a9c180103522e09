use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty catalog")]
    EmptyCatalog,
    #[error("line {line}: dimension mismatch (expected {expected}, found {found})")]
    LineDimension {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("untrainable tag `{0}`: training data needs both labels")]
    UntrainableTag(String),
    #[error("no convergence after {iters} iterations (gradient norm {grad_norm:e})")]
    NonConvergence {
        iters: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },
    #[error("undefined target: zero utility vector")]
    UndefinedTarget,
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid matrix: {0}")]
    Matrix(String),
    #[error("HMC diverged after {retries} step-size reductions (last step size {step_size:e})")]
    Divergence { retries: usize, step_size: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
