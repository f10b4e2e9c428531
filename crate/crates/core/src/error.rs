use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsatisfiable: even batch size 1 runs out of memory at input_length={input_length}, output_length={output_length}")]
    Unsatisfiable { input_length: f64, output_length: u64 },

    #[error("bucket ({bucket}, {subbucket}) is unsatisfiable: {source}")]
    UnsatisfiableCell {
        bucket: usize,
        subbucket: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("step runner is not monotone in batch size: {0}")]
    ContractViolation(String),

    #[error("pipeline failed at step {step}: {source}")]
    Step {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
