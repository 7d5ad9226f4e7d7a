use denoiserank::Error;

/// Command failures, grouped by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[source] Error),
    #[error("numeric error: {0}")]
    Numeric(#[source] Error),
    #[error("{0} gradient check(s) failed")]
    ChecksFailed(usize),
    #[error(transparent)]
    Other(Error),
}

impl CliError {
    pub const EXIT_OTHER: i32 = 1;
    pub const EXIT_CONFIG: i32 = 2;
    pub const EXIT_DATA: i32 = 3;
    pub const EXIT_NUMERIC: i32 = 4;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => Self::EXIT_CONFIG,
            CliError::Data(_) => Self::EXIT_DATA,
            CliError::Numeric(_) => Self::EXIT_NUMERIC,
            CliError::ChecksFailed(_) | CliError::Other(_) => Self::EXIT_OTHER,
        }
    }

    /// Classifies an error raised while reading inputs: anything but a
    /// numeric failure counts as a data error.
    pub fn data(e: Error) -> Self {
        match e.root() {
            Error::NonFinite(_) => CliError::Numeric(e),
            _ => CliError::Data(e),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e.root() {
            Error::NonFinite(_) => CliError::Numeric(e),
            Error::Parse { .. } | Error::EmptyDataset(_) | Error::Corrupt(_) | Error::Incompatible(_) => {
                CliError::Data(e)
            }
            Error::Validation(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(Error::Io(e))
    }
}
