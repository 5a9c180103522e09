//! Simulation harness: environments, seeded elicitation sessions against
//! simulated users, metrics, and experiment reports.

pub mod env;
pub mod experiment;
pub mod metrics;
pub mod report;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Core(#[from] elicit_core::Error),
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("no tag data generated")]
    NoTagData,
    #[error("user {user}, seed {seed_index}, query {step}: {source}")]
    Session {
        user: usize,
        seed_index: usize,
        step: usize,
        #[source]
        source: elicit_core::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_path_buf(),
        source,
    }
}
