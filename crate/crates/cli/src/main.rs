//! `adoc`: generate data, train, adapt and evaluate from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::{CliError, Kind};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADOC_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(&cli, a),
        Command::TrainBackbone(a) => commands::train_cmd(&cli, a, Kind::Backbone),
        Command::TrainAdapter(a) => commands::train_cmd(&cli, a, Kind::Adapter),
        Command::Finetune(a) => commands::train_cmd(&cli, a, Kind::Finetune),
        Command::Eval(a) => commands::eval_cmd(&cli, a),
        Command::CountParams(a) => commands::count_cmd(&cli, a),
        Command::Decode(a) => commands::decode_cmd(&cli, a),
        Command::Protocol(a) => commands::protocol_cmd(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
