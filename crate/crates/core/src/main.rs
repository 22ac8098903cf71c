mod cli;

use std::process::ExitCode;

use clap::Parser;
use clap::error::ErrorKind;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<convstruct::Error>() {
        Some(convstruct::Error::Diverged { .. }) => 3,
        Some(convstruct::Error::InvalidConfig(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
