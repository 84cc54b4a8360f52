use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("jump schedule error: {0}")]
    Schedule(String),

    #[error("grid error: {0}")]
    Grid(String),

    #[error("time {t} outside path range [{start}, {end}]")]
    Range { t: f64, start: f64, end: f64 },

    /// The state left the chart's validity domain. `jump` is set when the
    /// exit happened inside the fill curve of that jump (1-based).
    #[error("chart exit at t = {time}{}: {coords:?}", jump.map(|j| format!(" (fill of jump {j})")).unwrap_or_default())]
    DomainExit {
        time: f64,
        jump: Option<usize>,
        coords: Vec<f64>,
    },

    #[error("numerically singular frame at t = {time} (|det| = {det:e})")]
    Singular { time: f64, det: f64 },

    #[error("non-finite state at t = {time}")]
    NonFinite { time: f64 },
}

impl Error {
    /// Coarse category used for process exit codes and machine-readable reports.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Schedule(_) | Error::Grid(_) | Error::Range { .. } => {
                "config"
            }
            Error::DomainExit { .. } => "chart_exit",
            Error::Singular { .. } | Error::NonFinite { .. } => "numerical",
        }
    }

    /// Model time at which a numerical failure happened, if any.
    pub fn time(&self) -> Option<f64> {
        match self {
            Error::DomainExit { time, .. } | Error::Singular { time, .. } | Error::NonFinite { time } => Some(*time),
            _ => None,
        }
    }
}
