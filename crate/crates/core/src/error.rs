use thiserror::Error;

use crate::abr::PolicyError;
use crate::cluster::ClusterError;
use crate::condition::ConditionError;
use crate::eval::EvalError;
use crate::rl::RlError;
use crate::runtime::RuntimeError;
use crate::sim::SimError;
use crate::tensor::TensorError;
use crate::trace::TraceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Trace(_) => "trace",
            Error::Cluster(_) => "cluster",
            Error::Tensor(_) => "tensor",
            Error::Condition(_) => "condition",
            Error::Sim(_) => "sim",
            Error::Policy(_) => "policy",
            Error::Rl(_) => "rl",
            Error::Runtime(_) => "runtime",
            Error::Eval(_) => "eval",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
