use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use doboc::cli::{cmd_bounds, cmd_run, cmd_verify};
use doboc::simulator::threads_from_env;
use doboc::verify::{Scale, VerifyOptions};

#[derive(Parser)]
#[command(name = "doboc", version, about = "Distributed second-order optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its per-iteration trace as CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the step-size bounds and preconditions for a config.
    Bounds {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in invariant suite.
    Verify {
        #[arg(long, default_value = "default")]
        scale: Scale,
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, out } => cmd_run(&config, &out, threads_from_env()),
        Command::Bounds { config } => cmd_bounds(&config),
        Command::Verify { scale, inject_bug } => cmd_verify(
            scale,
            VerifyOptions {
                inject_sign_flip: inject_bug,
            },
        ),
    };
    ExitCode::from(code as u8)
}
