//! `medembed`: generation, ETL, training, transfer, pooling and reporting.

mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

/// Exit code for unknown flags and other usage errors.
const USAGE_EXIT: u8 = 64;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match commands::Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(USAGE_EXIT),
            };
        }
    };
    match commands::run(cli, &argv) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
