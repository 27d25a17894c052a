use thiserror::Error;

use crate::autodiff::GraphError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("structural error: {0}")]
    Structure(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("potential of set element {index} is not finite")]
    NonFinitePotential { index: usize },
    #[error("inner minimization diverged at step {step} (gradient norm {grad_norm})")]
    Divergence { step: usize, grad_norm: f64 },
    #[error("gradient for parameter `{0}` is not finite")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("power sums are not the image of a multiset in [0, 1]: {0}")]
    NotInImage(String),
    #[error("evaluation requires at least one sample")]
    EmptyEvaluation,
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
