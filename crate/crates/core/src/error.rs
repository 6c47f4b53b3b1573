use thiserror::Error;

use crate::gridworld::Cell;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("BFS source {0} is not a free cell")]
    InvalidSource(Cell),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("gate update produced non-finite parameters")]
    NonFiniteUpdate,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
