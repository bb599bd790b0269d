//! Command-line front end: synthetic data, ingestion, training, evaluation,
//! simulation and reporting. Every command writes a `manifest.json` next to
//! its outputs, and nothing is written unless the command succeeds.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;
use uamflow::sim::SimMode;

#[derive(Debug, Parser)]
#[command(
    name = "uamflow",
    version,
    about = "Trajectory prediction and UAM speed-adjustment simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic trajectories as CSV.
    Synth(Common),
    /// Window, split and normalise a trajectory CSV.
    Ingest(Common),
    /// Train a model on an ingested dataset.
    Train(Common),
    /// Score checkpoints on the test split.
    Eval(Common),
    /// Run a scenario in baseline or speed-adjusted mode.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode)]
        mode: SimMode,
        /// Flow checkpoint for the model predictor.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Build CDF, histogram, delay and CPA tables from simulation results.
    Report {
        /// Optional JSON with bin sizes.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `results.json` files from `simulate`.
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<SimMode, String> {
    s.parse()
        .map_err(|_| format!("expected 'baseline' or 'adjusted', got '{s}'"))
}

fn dispatch(cmd: Command) -> anyhow::Result<Vec<PathBuf>> {
    match cmd {
        Command::Synth(c) => commands::synth(&c.config, c.seed, &c.out),
        Command::Ingest(c) => commands::ingest(&c.config, c.seed, &c.out),
        Command::Train(c) => commands::train(&c.config, c.seed, &c.out),
        Command::Eval(c) => commands::eval(&c.config, c.seed, &c.out),
        Command::Simulate {
            common,
            mode,
            checkpoint,
        } => commands::simulate(&common.config, common.seed, &common.out, mode, checkpoint.as_deref()),
        Command::Report { config, out, results } => commands::report_cmd(config.as_deref(), &results, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Failure>().map_or(1, |f| f.kind.exit_code());
            ExitCode::from(code)
        }
    }
}
