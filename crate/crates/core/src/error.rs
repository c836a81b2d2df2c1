use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("object {object}: state space exceeds the cap of {cap} states")]
    Capacity { object: usize, cap: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("object {object} has no request stream at leaf {leaf}")]
    UndefinedStream { object: usize, leaf: usize },

    #[error("saturated allocation: {0}")]
    Saturation(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("object {object}: {source}")]
    Object {
        object: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn in_object(self, object: usize) -> Self {
        match self {
            e @ Error::Object { .. } | e @ Error::Capacity { .. } => e,
            other => Error::Object {
                object,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
