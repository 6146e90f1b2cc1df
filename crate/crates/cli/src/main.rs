use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moffo_cli::commands;

#[derive(Parser)]
#[command(name = "moffo", version, about = "Multilevel OFFO trust-region experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the solver and configured baselines, writing traces and a summary.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// First seed; repetitions use consecutive seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the rate-theorem constants and check a run against them.
    CheckBounds {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the built-in problems.
    Gradcheck {
        #[arg(long)]
        problem: Option<String>,
    },
    /// List the built-in problems.
    ListProblems,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, out, seed } => commands::cmd_run(&config, out.as_deref(), seed),
        Command::CheckBounds { config, out } => commands::cmd_check_bounds(&config, out.as_deref()),
        Command::Gradcheck { problem } => commands::cmd_gradcheck(problem.as_deref()),
        Command::ListProblems => commands::cmd_list_problems(),
    };
    ExitCode::from(code as u8)
}
