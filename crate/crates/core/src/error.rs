use std::path::PathBuf;

/// Errors raised by the toolkit. Each variant maps to a distinct CLI exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("budget conflict: {0}")]
    BudgetConflict(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Format {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Short machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotFound(_) => "input_not_found",
            Error::Format { .. } => "format",
            Error::Manifest(_) => "manifest",
            Error::Data(_) => "data",
            Error::Validation(_) => "validation",
            Error::Parameter(_) => "parameter",
            Error::BudgetConflict(_) => "budget_conflict",
            Error::Report(_) => "report",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotFound(_) => 3,
            Error::Format { .. } => 4,
            Error::Manifest(_) => 5,
            Error::Data(_) => 6,
            Error::Validation(_) => 7,
            Error::Parameter(_) => 8,
            Error::BudgetConflict(_) => 9,
            Error::Report(_) => 10,
            Error::Config(_) => 11,
            Error::Io { .. } => 12,
        }
    }
}
