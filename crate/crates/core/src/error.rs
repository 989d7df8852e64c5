use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: {message}")]
    InvalidRecord {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("model error: {0}")]
    Model(String),

    /// A detector failure in the middle of decoding. `accepted` counts the
    /// sentences that had already been committed when the failure happened.
    #[error("detector failed during {stage} after {accepted} accepted sentence(s): {source}")]
    Detector {
        stage: &'static str,
        accepted: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure came from a generation backend or a remote
    /// service rather than from the caller's input.
    pub fn is_transport(&self) -> bool {
        match self {
            Error::Backend(_) => true,
            Error::Detector { source, .. } => source.is_transport(),
            _ => false,
        }
    }

    /// Process exit status used by the command line: 2 for backend or
    /// transport failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_transport() {
            2
        } else {
            1
        }
    }
}
