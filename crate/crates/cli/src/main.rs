use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use defkt_cli::commands::{cmd_eval, cmd_inspect_partition, cmd_run, exit_code};
use defkt_cli::config::{parse_config, Overrides};
use defkt_core::Result;

/// Decentralized federated learning simulator.
///
/// Flags override the matching keys of the --config file.
#[derive(Parser)]
#[command(name = "defkt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured (strategy, seed) pair and write metrics CSVs
    Run {
        #[command(flatten)]
        flags: Overrides,
        /// Also write the initial model and every client's final model
        #[arg(long)]
        save_models: bool,
    },
    /// Print per-client sample counts and label histograms
    InspectPartition {
        #[command(flatten)]
        flags: Overrides,
    },
    /// Evaluate a saved model on the configured test set
    Eval {
        #[command(flatten)]
        flags: Overrides,
        /// Model file written by `run --save-models`
        #[arg(long)]
        model_file: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<()> {
    let stdout = &mut std::io::stdout();
    match cli.command {
        Command::Run { flags, save_models } => {
            cmd_run(&parse_config(&flags)?, save_models, stdout)?;
        }
        Command::InspectPartition { flags } => {
            print!("{}", cmd_inspect_partition(&parse_config(&flags)?)?);
        }
        Command::Eval { flags, model_file } => {
            let (acc, n) = cmd_eval(&parse_config(&flags)?, &model_file)?;
            println!("accuracy {acc:.6} on {n} samples");
        }
    }
    let _ = stdout.flush();
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            // usage errors are configuration errors; help and version succeed
            return if err.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
