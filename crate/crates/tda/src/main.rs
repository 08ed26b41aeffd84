use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = tda::cli::Cli::parse();
    match tda::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
