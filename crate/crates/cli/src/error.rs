use fpf_gain::GainError;

/// Exit status for a bad configuration or command line.
pub const EXIT_CONFIG: i32 = 3;
/// Exit status for a numerical failure.
pub const EXIT_SOLVER: i32 = 2;
/// Exit status for I/O failures.
pub const EXIT_IO: i32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Solver {
        context: String,
        #[source]
        source: GainError,
    },
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Solver { .. } => EXIT_SOLVER,
            Self::Io(_) => EXIT_IO,
        }
    }

    /// Classify a library error raised while doing `context`.
    pub fn from_gain(context: &str, err: GainError) -> Self {
        match err {
            GainError::InvalidModel(_)
            | GainError::InvalidArgument(_)
            | GainError::DimensionMismatch { .. }
            | GainError::Json(_) => Self::Config(format!("{context}: {err}")),
            GainError::Io(_) | GainError::Csv(_) => Self::Io(format!("{context}: {err}")),
            other => Self::Solver {
                context: context.to_string(),
                source: other,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        Self::Io(err.to_string())
    }
}

/// Attach a context string to library results.
pub trait Context<T> {
    fn context(self, what: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for Result<T, GainError> {
    fn context(self, what: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::from_gain(what, e))
    }
}
