use std::io;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// The sweep configuration is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] kvqp::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        HarnessError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for configuration problems,
    /// 1 for everything that fails at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
