mod args;
mod commands;
mod config;
mod error;
mod logging;
mod protocol_check;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use config::RunConfig;
use error::CliError;

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.into())
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Phantom(a) => commands::phantom(a, &cfg, cli.seed),
        Command::Preprocess(a) => commands::preprocess_cmd(a, &cfg),
        Command::Register(a) => commands::register_cmd(a, &cfg),
        Command::Segment(a) => commands::segment(a, &cfg),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::ProtocolCheck(a) => protocol_check::run(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init(cli.log);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
