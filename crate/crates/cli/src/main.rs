use std::path::PathBuf;
use std::process::ExitCode;

use backfill_cli::commands::{cmd_backfill, cmd_evaluate, cmd_filter, cmd_simulate};
use backfill_cli::config::{Method, RunConfig};
use backfill_cli::Result;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "backfill", version, about = "Backfill censored diffusion time series")]
struct Cli {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of simulated paths.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Input directory (defaults to the output directory).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate truth, ticks, dense window and benchmarks.
    Simulate,
    /// Run the forward filter over the dense window.
    Filter,
    /// Reconstruct the censored history with the chosen method.
    Backfill,
    /// Score backfill outputs against the truth.
    Evaluate,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(method) = cli.method {
        cfg.method = method;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(paths) = cli.paths {
        cfg.n_paths = paths;
    }
    if let Some(input) = cli.input {
        cfg.input_dir = Some(input);
    }
    match cli.command {
        Command::Simulate => {
            for p in cmd_simulate(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Filter => println!("wrote {}", cmd_filter(&cfg)?.display()),
        Command::Backfill => {
            for p in cmd_backfill(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Evaluate => {
            for (k, v) in cmd_evaluate(&cfg)?.entries() {
                println!("{k}={v}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
