use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod bench;
mod erf;
mod flow;
mod gradcheck;
mod oracle;
mod run;

use run::{CliError, Outcome, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "lsdfn", version, about = "LS-DFN self-checks, receptive-field sweeps, flow training and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// key=value config file; `#` starts a comment line.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value override, applied after the config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Finite-difference gradient checks over a size grid.
    Gradcheck,
    /// Fast path vs reference equivalence suites.
    OracleCheck,
    /// Effective receptive field sweep.
    Erf,
    /// Train a flow model.
    Train,
    /// Run a trained checkpoint over a dataset.
    Infer,
    /// Time the reference and factored sampling paths.
    Bench,
}

fn dispatch(cli: &Cli) -> Result<Outcome, CliError> {
    let run = RunConfig::load(cli.config.as_deref(), &cli.sets, cli.seed, cli.out.clone())?;
    match cli.command {
        Command::Gradcheck => gradcheck::run(&run),
        Command::OracleCheck => oracle::run(&run),
        Command::Erf => erf::run(&run),
        Command::Train => flow::train(&run),
        Command::Infer => flow::infer(&run),
        Command::Bench => bench::run(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
