use std::fmt;

/// CLI failure categories, each with a fixed process exit code:
/// configuration problems exit 1, input problems exit 2, non-finite
/// numerics exit 3, failed verification exits 4.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Input(String),
    Numeric(String),
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
            CliError::Check(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Classify a core pipeline error raised while executing a run: shape
/// complaints concern the provided inputs, non-finite values and domain
/// escapes are numeric, everything else points back at the configuration.
pub fn classify_run_error(e: dtea_core::Error) -> CliError {
    use dtea_core::Error as E;
    match e {
        E::NonFinite { .. } | E::Domain { .. } => CliError::Numeric(e.to_string()),
        E::ShapeMismatch { .. } | E::ChannelMismatch { .. } | E::Io(_) | E::Format { .. } => {
            CliError::Input(e.to_string())
        }
        other => CliError::Config(other.to_string()),
    }
}
