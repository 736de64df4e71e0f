mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{expand_config, Cli};

/// Failure of a command, carrying its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_CHECKPOINT: u8 = 5;
pub const EXIT_THRESHOLD: u8 = 6;

/// Exit status for a library error outside checkpoint loading.
pub fn code_of(e: &mcn_core::Error) -> u8 {
    use mcn_core::Error::*;
    match e {
        Io { .. } | Format { .. } | Data(_) => EXIT_IO,
        Divergence(_) => EXIT_DIVERGENCE,
        _ => EXIT_CONFIG,
    }
}

impl From<mcn_core::Error> for Failure {
    fn from(e: mcn_core::Error) -> Self {
        Failure::new(code_of(&e), e.to_string())
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return ExitCode::from(f.code);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
