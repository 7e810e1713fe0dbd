//! Command-line surface for joint structure discovery and imputation.

mod archive;
mod config;
mod discover;
mod evaluate;
mod impute;
mod simulate;
mod train;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "visl",
    version,
    about = "Learn a directed graph over variable groups while imputing missing values"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a known ground-truth graph
    Simulate(simulate::Args),
    /// Fit the model; writes a model archive and a training trace
    Train(train::Args),
    /// Threshold (optionally averaged) edge posteriors into an edge list
    Discover(discover::Args),
    /// Fill the missing cells of a data file using a trained archive
    Impute(impute::Args),
    /// Score structure recovery and/or imputation quality
    Evaluate(evaluate::Args),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate::run(args),
        Command::Train(args) => train::run(args),
        Command::Discover(args) => discover::run(args),
        Command::Impute(args) => impute::run(args),
        Command::Evaluate(args) => evaluate::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
