use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] gast_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    /// Malformed or missing dataset content.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration or argument combination.
    #[error("contract error: {0}")]
    Contract(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for contract violations, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        use gast_core::Error as C;
        match self {
            Error::Contract(_) => 2,
            Error::Core(C::Dimension { .. } | C::Rank { .. } | C::Axis { .. } | C::Contract(_) | C::BehindCamera(_)) => 2,
            _ => 3,
        }
    }
}
