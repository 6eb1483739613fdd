use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate weights: sum is {0}")]
    DegenerateWeights(f64),

    #[error("credential error: {0}")]
    Credential(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("no mock fixture matches request (prompt starts with {0:?})")]
    FixtureMiss(String),

    #[error("completion has no log-probabilities at position {0}")]
    MissingLogprobs(usize),

    #[error("template error: {0}")]
    Template(String),

    #[error("could not parse model output: {reason}; raw text: {raw:?}")]
    Parse { reason: String, raw: String },

    #[error("none of the {0} samples produced a parsable answer")]
    NoParsableSamples(usize),

    #[error("confidence ties present; apply the noise protocol first")]
    TiesPresent,

    #[error("AUROC undefined: records contain a single correctness class")]
    UndefinedAuroc,

    #[error("{path}:{line}: {msg}")]
    Dataset {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("cache miss in offline mode for key {0}")]
    CacheMiss(String),

    #[error("run aborted: {failed} of {attempted} questions failed")]
    RunAborted { failed: usize, attempted: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(reason: impl Into<String>, raw: &str) -> Self {
        Error::Parse {
            reason: reason.into(),
            raw: raw.to_string(),
        }
    }
}
