use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = mclsr::cli::Cli::parse();
    match mclsr::cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
