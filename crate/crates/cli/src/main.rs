use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sddej_cli::{run, Mode, Options};

#[derive(Parser)]
#[command(name = "sddej", version, about = "Delay equations with jumps on manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for ensembles and multi-path checks.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve once and write the trajectory.
    Simulate,
    /// Compare the lifted solution with the lift of the base solution.
    LiftCheck,
    /// Parallel transport and holonomy along a curve.
    Transport,
    /// Self-convergence over successively halved steps.
    Convergence,
    /// Independent trajectories with derived seeds.
    Ensemble,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mode = match cli.command {
        Command::Simulate => Mode::Simulate,
        Command::LiftCheck => Mode::LiftCheck,
        Command::Transport => Mode::Transport,
        Command::Convergence => Mode::Convergence,
        Command::Ensemble => Mode::Ensemble,
    };
    let Some(config) = cli.config else {
        eprintln!(r#"{{"category":"config","message":"--config is required"}}"#);
        return ExitCode::from(2);
    };
    let opts = Options {
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads,
    };
    match run(mode, &config, &opts) {
        Ok(report) => {
            println!("{}", serde_json::to_string(&report).expect("serializable report"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", serde_json::to_string(&err.report()).expect("serializable error"));
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
