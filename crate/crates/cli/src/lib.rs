//! Command-line front end for the delay-equation solvers: TOML configs,
//! run modes, and trajectory/report output.

pub mod config;
pub mod error;
pub mod modes;
pub mod output;

pub use config::RunConfig;
pub use error::CliError;
pub use modes::{run, run_config, Mode, Options, RunReport};
