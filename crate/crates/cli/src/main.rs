//! `fedmerge` command-line tool.

mod commands;
mod exit;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{inspect, merge, simulate, sweep, toy};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  invalid flags or hyperparameters
  3  unreadable, malformed or mismatched input files
  4  a merge rule needs training metadata that was not supplied
  5  the optimum oracle did not converge";

#[derive(Debug, Parser)]
#[command(name = "fedmerge", version, about = "Merge fine-tuned checkpoints with federated aggregation rules", after_help = EXIT_CODES)]
struct Cli {
    /// Seed for anything stochastic that the inputs do not already seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output file or directory (meaning depends on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// error | warn | info | debug | trace
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge fine-tuned checkpoints into the pre-trained one.
    Merge(merge::Args),
    /// Run a FedAvg simulation from a JSON experiment config.
    Simulate(simulate::Args),
    /// Grid-search lambda (and rho) against an evaluator.
    Sweep(sweep::Args),
    /// Print task-vector norms, cosine similarities and sign agreement.
    Inspect(inspect::Args),
    /// Write the two-task toy MLP checkpoints and a matching eval config.
    Toy(toy::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();

    let out = cli.out.as_deref();
    let result = match &cli.command {
        Command::Merge(args) => merge::run(args, out),
        Command::Simulate(args) => simulate::run(args, out, cli.seed),
        Command::Sweep(args) => sweep::run(args, out),
        Command::Inspect(args) => inspect::run(args, out),
        Command::Toy(args) => toy::run(args, out, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
