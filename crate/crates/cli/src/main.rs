use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use netform_cli::commands::{run, Command, RunOptions};

/// Forms interbank networks from banks' expected-utility optimization and
/// scores them under simulated shocks.
#[derive(Debug, Parser)]
#[command(name = "netform", version)]
struct Args {
    #[arg(long, value_enum)]
    command: Command,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `simulation.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `simulation.draws`.
    #[arg(long)]
    draws: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(t) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cli: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let opts = RunOptions {
        command: args.command,
        config: args.config,
        out: args.out,
        seed: args.seed,
        draws: args.draws,
        threads: args.threads,
    };
    match run(&opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
