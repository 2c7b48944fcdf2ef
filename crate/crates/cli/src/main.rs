//! `hwdiff`: command-line front end of the `hwdiff` library.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for
//! failures during computation or while writing artifacts.

mod commands;
mod output;

use std::process::ExitCode;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    ExitCode::from(commands::run(&argv))
}
