use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = hsdpo::cli::Cli::parse();
    match hsdpo::cli::run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
