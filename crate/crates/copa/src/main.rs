use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match copa::cli::run(copa::cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
