use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cwgf::config::parse_sweep;
use cwgf::{run, CliError, RawConfig, RunOptions};

#[derive(Parser)]
#[command(
    name = "cwgf",
    version,
    about = "Particle posterior sampling with prompt optimisation on Gaussian and mixture worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        out_dir: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write particle trajectories.
        #[arg(long)]
        trace: bool,
        /// Sweep one key, e.g. `solver.plan=cyclic,decreasing,uniform`.
        #[arg(long)]
        sweep: Option<String>,
    },
}

fn threads() -> usize {
    std::env::var("CWGF_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out_dir,
            seed,
            trace,
            sweep,
        } => {
            let raw = RawConfig::load(&config)?;
            let opts = RunOptions {
                seed,
                trace,
                sweep: sweep.as_deref().map(parse_sweep).transpose()?,
                threads: threads(),
            };
            for (k, v) in run(&raw, &out_dir, &opts)? {
                println!("{k} = {v}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cwgf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
