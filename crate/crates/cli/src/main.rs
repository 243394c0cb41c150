//! `cuot`: data generation, training, evaluation, oracle checks and plots.

mod commands;
mod config;
mod plot;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cuot",
    version,
    about = "Conditional unbalanced optimal transport maps on 2D data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where a run's configuration comes from.
#[derive(Args, Clone)]
pub struct Source {
    /// TOML experiment file.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named preset, e.g. `circles-cuotm` or `circles-outlier-3-4-cotm`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Preset scale: `paper` or `desk`.
    #[arg(long, default_value = "paper")]
    pub scale: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/test CSVs and standardization statistics.
    GenerateData {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run, or several seeds in parallel processes.
    Train {
        #[command(flatten)]
        source: Source,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seeds, each trained in its own process.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Concurrent processes for `--seeds`; defaults to one per seed.
        #[arg(long)]
        jobs: Option<usize>,
        /// Directory written by `generate-data`; data is regenerated otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trained run on its test split.
    Evaluate {
        /// Run directory holding `checkpoint.json`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Seed for evaluation noise; the run's seed by default.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; `<run>/evaluation.json` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the test pairs against themselves instead of a generator.
        #[arg(long)]
        debug_identity: bool,
    },
    /// Run the discrete oracle invariant suite or solve instance files.
    OracleCheck {
        /// Random instances for the duality and uniqueness checks.
        #[arg(long, default_value_t = 10)]
        random: usize,
        /// Atoms per side of each random instance.
        #[arg(long, default_value_t = 5)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instance JSON file, or a directory of them, to solve instead.
        #[arg(long)]
        instances: Option<PathBuf>,
        /// Where plan files are written for `--instances`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scatter and KDE SVGs of test data against one or more runs.
    Plot {
        /// Run directories; the first run's test split is the target.
        #[arg(long, required = true, num_args = 1..)]
        run: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; the first run directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// KDE grid cells per side.
        #[arg(long, default_value_t = 64)]
        grid: usize,
    },
    /// Train (or reuse) all clean-data presets and write the comparison table.
    ReproduceTable1(tables::TableArgs),
    /// Train (or reuse) all outlier presets and write the robustness table.
    ReproduceTable3(tables::TableArgs),
}

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Divergence(String),
    Oracle(String),
    Other(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Oracle(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Divergence(m) => write!(f, "training diverged: {m}"),
            CliError::Oracle(m) => write!(f, "oracle check failed: {m}"),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Other(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData { source, seed, out } => commands::generate_data(&source, seed, out),
        Command::Train {
            source,
            seed,
            seeds,
            jobs,
            data,
            out,
        } => commands::train(&source, seed, &seeds, jobs, data, out),
        Command::Evaluate {
            run,
            data,
            seed,
            out,
            debug_identity,
        } => commands::evaluate(&run, data, seed, out, debug_identity),
        Command::OracleCheck {
            random,
            size,
            seed,
            instances,
            out,
        } => commands::oracle_check(random, size, seed, instances, out),
        Command::Plot {
            run,
            data,
            out,
            grid,
        } => commands::plot(&run, data, out, grid),
        Command::ReproduceTable1(args) => tables::table1(&args),
        Command::ReproduceTable3(args) => tables::table3(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
