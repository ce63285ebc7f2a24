use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus {0} contains no non-blank lines")]
    EmptyCorpus(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    /// None of the requested window scales fit the stream.
    #[error("degenerate input: stream length {len} is shorter than every scale in {scales:?}; retry with scales {{1}}")]
    DegenerateInput { len: usize, scales: Vec<usize> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("artifact version mismatch in {path}: file has version {found}, expected {expected}")]
    Version {
        path: PathBuf,
        found: u16,
        expected: u16,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 I/O, 2 configuration, 3 divergence, 4 artifact or version.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::EmptyCorpus(_) => 1,
            Error::Config(_) | Error::DegenerateInput { .. } | Error::Contract(_) => 2,
            Error::Divergence(_) => 3,
            Error::Artifact(_) | Error::Version { .. } => 4,
        }
    }
}
