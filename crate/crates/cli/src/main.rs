use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phred_cli::commands::{cmd_bounds, cmd_evaluate, cmd_reduce, cmd_simulate, cmd_sweep};
use phred_cli::config::RunConfig;
use phred_cli::CliError;

/// Structure-preserving model reduction experiments for port-Hamiltonian systems.
#[derive(Parser)]
#[command(name = "phred", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config (default `phred-out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the full-order model on the configured inputs.
    Simulate(Common),
    /// Build bases and the reduced model; write bases and structure report.
    Reduce(Common),
    /// Compare full and reduced simulations; write errors and timings.
    Evaluate(Common),
    /// Evaluate the a-priori error bounds against measured errors.
    Bounds(Common),
    /// Run the cross product of the sweep lists.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Worker threads for independent sweep points.
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("phred-out"));
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    match cli.command {
        Command::Simulate(c) => load(&c).and_then(|(cfg, out)| cmd_simulate(&cfg, &out)),
        Command::Reduce(c) => load(&c).and_then(|(cfg, out)| cmd_reduce(&cfg, &out)),
        Command::Evaluate(c) => load(&c).and_then(|(cfg, out)| cmd_evaluate(&cfg, &out)),
        Command::Bounds(c) => load(&c).and_then(|(cfg, out)| cmd_bounds(&cfg, &out)),
        Command::Sweep { common, threads } => load(&common).and_then(|(cfg, out)| cmd_sweep(&cfg, &out, threads)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PHRED_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("phred: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
