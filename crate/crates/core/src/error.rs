use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller broke an operation's precondition (non-scalar loss, missing grad, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A parameter bank was used for a domain it does not belong to, or the
    /// domain is not registered.
    #[error("routing error: {0}")]
    Routing(String),

    #[error("label of length {label_len} (with {repeats} adjacent repeats) cannot be aligned in {timesteps} timesteps{}", sample.map(|s| format!(" (sample {s})")).unwrap_or_default())]
    InfeasibleLabel {
        label_len: usize,
        repeats: usize,
        timesteps: usize,
        sample: Option<u64>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("corrupt file at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
