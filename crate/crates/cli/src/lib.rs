//! The `sand` command line: data generation, training, evaluation,
//! hyperparameter sweeps and the attention complexity benchmark.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training divergence.

pub mod bench;
mod error;
pub mod eval;
pub mod gen;
mod io;
pub mod sweep;
pub mod train;

use std::path::PathBuf;

use clap::{CommandFactory, Parser, Subcommand};

pub use error::{CliError, CliResult, EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SAND_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "sand", version, about = "Masked self-attention models for multivariate time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as NDJSON splits plus a manifest.
    Gen(gen::GenArgs),
    /// Train a model from a config file and NDJSON splits.
    Train(train::TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(eval::EvalArgs),
    /// Time forward and backward passes of the encoder.
    Bench(bench::BenchArgs),
    /// Train one model per grid point and tabulate validation metrics.
    Sweep(sweep::SweepArgs),
}

/// Output directory flag shared by the commands that write files.
#[derive(Debug, Clone, clap::Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = "sand-out")]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen(a) => gen::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Bench(a) => bench::run(&a),
        Command::Sweep(a) => sweep::run(&a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return EXIT_OK;
            }
            eprintln!("\n{}", Cli::command().render_usage());
            return EXIT_USAGE;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
