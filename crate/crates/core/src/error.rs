use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (dimensions, hyperparameters).
    #[error("configuration error: {0}")]
    Config(String),

    /// Arguments out of their valid range.
    #[error("invalid input: {0}")]
    Input(String),

    /// A file that could not be parsed into the expected format.
    #[error("failed to load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    /// An inner failure annotated with the round and client it happened in.
    #[error("round {round}, client {client}: {source}")]
    InRound {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn in_round(self, round: usize, client: usize) -> Self {
        Error::InRound {
            round,
            client,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips [`Error::InRound`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::InRound { source, .. } => source.root(),
            other => other,
        }
    }
}
