mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drgate::error::ErrorKind;

use commands::{Globals, RegimeArg};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] drgate::Error),
    #[error("{} does not match the configuration schema:\n  {}", path.display(), errors.join("\n  "))]
    Schema { path: PathBuf, errors: Vec<String> },
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.kind() == ErrorKind::Runtime => 1,
            CliError::Runtime(_) => 1,
            _ => 2,
        }
    }

    fn report(&self) {
        match self {
            CliError::Core(e) => {
                eprintln!("error [{}]: {e}", e.module());
                eprintln!("  hint: {}", e.hint());
            }
            CliError::Schema { .. } => {
                eprintln!("error [config]: {self}");
                eprintln!("  hint: see crates/cli/schema for the accepted fields");
            }
            CliError::Input(_) => eprintln!("error [config]: {self}"),
            CliError::Runtime(_) => eprintln!("error [io]: {self}"),
        }
    }
}

/// Doubly robust GATE and ATE estimation.
#[derive(Debug, Parser)]
#[command(name = "drgate", version)]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "drgate-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the GATE curve over the moderator grid.
    EstimateGate {
        /// CSV data file; overrides `data.path`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Extra curves at these multiples of the raw LOOCV bandwidth.
        #[arg(long, value_delimiter = ',')]
        sensitivity: Vec<f64>,
        /// Also write the per-row scores to scores.csv.
        #[arg(long)]
        export_scores: bool,
    },
    /// Estimate smoothed and averaged ATEs and compare them.
    EstimateAte {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Smooth with an infinite bandwidth.
        #[arg(long)]
        flat: bool,
        #[arg(long)]
        export_scores: bool,
    },
    /// Run a Monte Carlo experiment.
    Simulate {
        /// Overrides the replication count of the specification.
        #[arg(long)]
        replications: Option<usize>,
        /// Also write per-replication estimates to replications.csv.
        #[arg(long)]
        dump_replications: bool,
    },
    /// Print the admissible bandwidth-exponent range as JSON.
    BandwidthRange {
        #[arg(long)]
        lambda_z: u32,
        #[arg(long, default_value_t = 2)]
        kernel_order: u32,
        #[arg(long)]
        delta_p: f64,
        #[arg(long)]
        delta_m: f64,
        #[arg(long, value_enum, default_value_t = RegimeArg::Both)]
        regime: RegimeArg,
        /// Check a bandwidth exponent against every condition.
        #[arg(long)]
        delta_h: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("cannot start the thread pool: {e}")))?;
    }
    let g = Globals { config: cli.config, seed: cli.seed, out_dir: cli.out_dir };
    match cli.command {
        Command::EstimateGate { data, sensitivity, export_scores } => {
            commands::estimate_gate_cmd(&g, data, &sensitivity, export_scores)
        }
        Command::EstimateAte { data, flat, export_scores } => commands::estimate_ate_cmd(&g, data, flat, export_scores),
        Command::Simulate { replications, dump_replications } => commands::simulate_cmd(&g, replications, dump_replications),
        Command::BandwidthRange { lambda_z, kernel_order, delta_p, delta_m, regime, delta_h } => {
            commands::bandwidth_range_cmd(lambda_z, kernel_order, delta_p, delta_m, regime, delta_h)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.report();
            ExitCode::from(e.exit_code())
        }
    }
}
