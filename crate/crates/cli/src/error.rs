use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Core(#[from] sddej::Error),
}

/// What is printed on stderr when a run fails.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub category: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jump: Option<usize>,
}

impl CliError {
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Core(e) => e.category(),
        }
    }

    /// 2 for configuration problems, 3 for numerical failures, 4 for chart
    /// exits, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "numerical" => 3,
            "chart_exit" => 4,
            _ => 1,
        }
    }

    pub fn report(&self) -> ErrorReport {
        let (time, jump) = match self {
            CliError::Core(e @ sddej::Error::DomainExit { jump, .. }) => (e.time(), *jump),
            CliError::Core(e) => (e.time(), None),
            _ => (None, None),
        };
        ErrorReport {
            category: self.category(),
            message: self.to_string(),
            time,
            jump,
        }
    }
}
