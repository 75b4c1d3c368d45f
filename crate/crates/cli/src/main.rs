//! `mfgcast`: run canned forecasting tests, parameter sweeps and
//! verification checks, writing CSV and JSON artifacts.
//!
//! Exit status: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use commands::Failure;
use config::{parse_config_text, Cli, Overrides};

fn file_layer(cli: &Cli) -> Result<Overrides, Failure> {
    let Some(path) = &cli.config else {
        return Ok(Overrides::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let pairs = parse_config_text(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Overrides::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = file_layer(&cli).and_then(|file| commands::execute(&cli.command, &file));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mfgcast {}: {}", cli.command.name(), f.message());
            ExitCode::from(f.code() as u8)
        }
    }
}
