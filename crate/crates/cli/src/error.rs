use thiserror::Error;

/// Exit code for a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit code for an invalid command line or configuration.
pub const EXIT_INVALID: i32 = 1;
/// Exit code for a failure while running a valid configuration.
pub const EXIT_RUNTIME: i32 = 2;
/// Exit code for a verification run with at least one failing check.
pub const EXIT_VERIFY_FAILED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] bridgeflow::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{failed} verification check(s) failed")]
    VerifyFailed { failed: usize },
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl ToString) -> Self {
        CliError::Config {
            key: key.into(),
            message: message.to_string(),
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => EXIT_INVALID,
            CliError::Run(_) | CliError::Io { .. } => EXIT_RUNTIME,
            CliError::VerifyFailed { .. } => EXIT_VERIFY_FAILED,
        }
    }
}

/// Attributes a module validation error to the config section it came from.
pub fn in_section(section: &str, err: bridgeflow::Error) -> CliError {
    match err {
        bridgeflow::Error::InvalidParameter { name, reason } => {
            CliError::config(format!("{section}.{name}"), reason)
        }
        other => CliError::config(section, other),
    }
}

pub type CliResult<T> = Result<T, CliError>;
