use thiserror::Error;

/// A runtime or validation failure (exit code 1). Usage errors are
/// reported by clap before any of these can occur.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{flag} {value}: {source}")]
    Arg {
        flag: &'static str,
        value: String,
        #[source]
        source: scalae_core::Error,
    },
    #[error("{flag} {value}: {source}")]
    Io {
        flag: &'static str,
        value: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{flag} {value}: {source}")]
    Json {
        flag: &'static str,
        value: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{flag}: {message}")]
    Invalid { flag: &'static str, message: String },
    #[error("training failed after {epochs} epoch(s): {source}")]
    Training {
        epochs: usize,
        #[source]
        source: scalae_core::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Attaches the flag and its value to a core error.
pub trait FlagContext<T> {
    fn flag(self, flag: &'static str, value: impl std::fmt::Display) -> Result<T>;
}

impl<T> FlagContext<T> for scalae_core::Result<T> {
    fn flag(self, flag: &'static str, value: impl std::fmt::Display) -> Result<T> {
        self.map_err(|source| CliError::Arg {
            flag,
            value: value.to_string(),
            source,
        })
    }
}

impl<T> FlagContext<T> for std::io::Result<T> {
    fn flag(self, flag: &'static str, value: impl std::fmt::Display) -> Result<T> {
        self.map_err(|source| CliError::Io {
            flag,
            value: value.to_string(),
            source,
        })
    }
}

impl<T> FlagContext<T> for serde_json::Result<T> {
    fn flag(self, flag: &'static str, value: impl std::fmt::Display) -> Result<T> {
        self.map_err(|source| CliError::Json {
            flag,
            value: value.to_string(),
            source,
        })
    }
}
