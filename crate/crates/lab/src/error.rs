use std::path::PathBuf;

/// Errors raised by the file layer and the command line.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{}: not a valid checkpoint: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    /// The arrays stored in a checkpoint disagree with its own config, or a
    /// loaded model disagrees with the config it is used under.
    #[error("{}: config mismatch: {detail}", path.display())]
    ConfigMismatch { path: PathBuf, detail: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] decode_core::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_UNDEFINED_METRIC: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        use decode_core::Error as C;
        match self {
            LabError::ConfigMismatch { .. } => EXIT_INVARIANT,
            LabError::Core(C::UndefinedMetric(_)) => EXIT_UNDEFINED_METRIC,
            LabError::Core(C::Invariant(_) | C::Shape { .. }) => EXIT_INVARIANT,
            _ => EXIT_USAGE,
        }
    }
}
