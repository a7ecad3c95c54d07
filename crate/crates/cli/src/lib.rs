//! Command-line front end: `fit`, `simulate` and `evaluate`.
//!
//! Exit codes are 0 on success, 2 for usage errors, 3 for data or I/O problems and 4 for
//! numerical failures.

pub mod config;
pub mod error;
pub mod evaluate;
pub mod fit;
pub mod setup;
pub mod simulate;
pub mod standardize;

use config::{Cli, Command, EvaluateConfig, ModelConfig, SimulateConfig};
pub use error::{CliError, CliResult};

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Fit(args) => {
            let cfg: ModelConfig = config::resolve(args.config.as_deref(), args)?;
            fit::cmd_fit(&cfg)?;
        }
        Command::Simulate(args) => {
            let cfg: SimulateConfig = config::resolve(args.config.as_deref(), args)?;
            simulate::cmd_simulate(&cfg)?;
        }
        Command::Evaluate(args) => {
            let cfg: EvaluateConfig = config::resolve(args.config.as_deref(), args)?;
            for a in evaluate::cmd_evaluate(&cfg)?.aggregates {
                println!("{}\tmean MAPE {:.4}\tav.size {:.2}", a.method, a.mean_mape, a.mean_size);
            }
        }
    }
    Ok(())
}

/// Runs a parsed command line and returns the process exit code, printing a JSON
/// error record to stderr on failure.
pub fn run(cli: &Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.record());
            e.exit_code()
        }
    }
}
