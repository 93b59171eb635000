//! `cfasl` command-line tool.
//!
//! Exit status: 0 success, 2 invalid arguments, 3 numerical failure, 4 I/O failure.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    let outcome = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a).map(drop),
        Command::Analyze(a) => commands::analyze(a).map(drop),
        Command::GenData(a) => commands::gen_data(a).map(drop),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
