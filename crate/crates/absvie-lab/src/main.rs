//! Thin command-line wrapper over the experiment runner: one experiment per
//! invocation, CSV results plus a JSON manifest, exit code 0 on a passing
//! verdict, 2 on a failing verdict, 1 on configuration or solver errors.

use absvie_lab::runner::{self, ExperimentKind, Overrides, Verdict};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "absvie-lab",
    about = "Monte Carlo workbench for anticipated backward stochastic Volterra equations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for results.csv and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Override the Monte Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Override the step count to the horizon.
    #[arg(long)]
    steps: Option<usize>,
    /// Cap the worker count (results are identical at any setting).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one backward equation and report Y, the field noise floor and
    /// the representation residual.
    SolveAbsvie(RunArgs),
    /// Check the forward/backward pairing identity on a shared ensemble.
    CheckDuality(RunArgs),
    /// Solve an ordered pair of backward equations and test the ordering.
    CheckComparison(RunArgs),
    /// Iterate the two-player equilibrium and certify stationarity.
    SolveGame(RunArgs),
    /// Compare field columns against derivative solutions.
    CheckRegularity(RunArgs),
    /// Simulate a linear delay system and report the mean path.
    SimulateSdvie(RunArgs),
    /// Print the named problem families and their parameters.
    ListBuiltins,
}

fn execute(kind: ExperimentKind, args: &RunArgs) -> ExitCode {
    let config_text = match std::fs::read_to_string(&args.config) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(1);
        }
    };
    let overrides = Overrides {
        seed: args.seed,
        paths: args.paths,
        steps: args.steps,
        threads: args.threads,
    };
    match runner::run_to_dir(&config_text, Some(kind), &overrides, &args.out) {
        Ok((Verdict::Pass, csv, _)) => {
            println!("pass: results in {}", csv.display());
            ExitCode::from(0)
        }
        Ok((Verdict::Fail(reason), csv, _)) => {
            eprintln!("verdict failed: {reason}");
            println!("results in {}", csv.display());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::SolveAbsvie(args) => execute(ExperimentKind::SolveAbsvie, args),
        Command::CheckDuality(args) => execute(ExperimentKind::CheckDuality, args),
        Command::CheckComparison(args) => execute(ExperimentKind::CheckComparison, args),
        Command::SolveGame(args) => execute(ExperimentKind::SolveGame, args),
        Command::CheckRegularity(args) => execute(ExperimentKind::CheckRegularity, args),
        Command::SimulateSdvie(args) => execute(ExperimentKind::SimulateSdvie, args),
        Command::ListBuiltins => {
            print!("{}", runner::catalog_text());
            ExitCode::from(0)
        }
    }
}
