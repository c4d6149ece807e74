use thiserror::Error;

pub type Result<T> = std::result::Result<T, SimbaError>;

#[derive(Debug, Error)]
pub enum SimbaError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SimbaError {
    pub fn config(msg: impl Into<String>) -> Self {
        SimbaError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        SimbaError::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        SimbaError::Numerical(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        SimbaError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the command-line contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimbaError::Config(_) => 2,
            SimbaError::Data(_) | SimbaError::Io { .. } => 3,
            SimbaError::Numerical(_) => 4,
        }
    }
}
