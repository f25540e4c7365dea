//! Command-line front end for the hierarchy-aware contrastive
//! classification library: dataset synthesis, training, evaluation,
//! standalone metrics, and a gradient audit, all deterministic under
//! fixed flags and seeds.

pub mod args;
pub mod commands;
pub mod config;

use clap::Parser;

use args::{Cli, Command};
use hcal_core::ErrorKind;

/// Parse the process arguments, run the selected command, and hand back
/// the exit code: 0 success, 1 usage or configuration error, 2 data
/// error, 3 numerical failure.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests render through clap and exit
            // cleanly; real usage errors share the configuration code.
            let code = i32::from(err.use_stderr());
            let _ = err.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Synth(args) => commands::cmd_synth(args).map(|()| 0),
        Command::Train(args) => commands::cmd_train(args).map(|()| 0),
        Command::Eval(args) => commands::cmd_eval(args).map(|()| 0),
        Command::Metrics(args) => commands::cmd_metrics(args).map(|()| 0),
        Command::Gradcheck(args) => commands::cmd_gradcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

/// Exit code for a failed command.
pub fn exit_code(err: &hcal_core::Error) -> i32 {
    match err.kind() {
        ErrorKind::Config => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}
