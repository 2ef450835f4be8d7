use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use crisis_cli::app::{self, AppError, Overrides};
use crisis_cli::scenario_file::ScenarioFile;
use crisis_core::market::Mechanism;

#[derive(Parser)]
#[command(
    name = "crisis",
    version,
    about = "Fair distribution markets for scarce goods"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Couple,
    Seller,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and report every violation.
    Validate { file: PathBuf },
    /// Run a scenario and write result tables and the trace.
    Run {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        markets: Option<u32>,
        /// Price increment as `p/q`.
        #[arg(long)]
        epsilon: Option<String>,
        #[arg(long, value_enum)]
        mechanism: Option<MechanismArg>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Recompute a couple-auction trace and check it.
    TraceReplay { trace: PathBuf },
}

fn dispatch(cli: Cli) -> Result<String, AppError> {
    match cli.command {
        Command::Validate { file } => app::validate(&ScenarioFile::load(&file)?),
        Command::Run {
            file,
            seed,
            markets,
            epsilon,
            mechanism,
            out,
        } => {
            let overrides = Overrides {
                seed,
                markets,
                epsilon,
                mechanism: mechanism.map(|m| match m {
                    MechanismArg::Couple => Mechanism::Couple,
                    MechanismArg::Seller => Mechanism::Seller,
                }),
            };
            app::run(&file, &overrides, &out)
        }
        Command::TraceReplay { trace } => app::trace_replay(&trace),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
