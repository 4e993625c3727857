use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "mfclab",
    about = "Mean-field control laboratory: run experiment configs and replay recorded manifests"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config (JSON) and write tables, manifest, summary.
    Run { config: PathBuf },
    /// Re-execute a recorded manifest and check outputs byte for byte.
    Replay { manifest: PathBuf },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config } => mfc_cli::run(&config),
        Command::Replay { manifest } => mfc_cli::replay(&manifest),
    };
    ExitCode::from(code as u8)
}
