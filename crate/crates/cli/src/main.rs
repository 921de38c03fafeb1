use std::process::ExitCode;

use clap::Parser;
use scar_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            let text: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            let text = text.join(" ");
            eprintln!("{}", CliError::Usage(text.trim_start_matches("error: ").to_string()).to_line());
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match run(&cli, &argv) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(1)
        }
    }
}
