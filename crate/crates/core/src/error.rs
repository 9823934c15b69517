use thiserror::Error;

use crate::sampler::ChainDraws;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("{name} = {value} is outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("data validation failed: {0}")]
    Data(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    /// Some chains finished before another aborted. The completed chains are kept.
    #[error("inference aborted after {} completed chain(s): {message}", completed.len())]
    PartialInference {
        completed: Vec<ChainDraws>,
        message: String,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(name: &'static str, value: f64, domain: &'static str) -> Self {
        Error::Domain {
            name,
            value,
            domain,
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Data(_) | Error::Graph(_) | Error::Csv(_) => 3,
            Error::Sampler(_) | Error::PartialInference { .. } => 4,
            _ => 1,
        }
    }
}
