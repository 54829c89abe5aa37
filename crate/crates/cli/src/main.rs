use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    ExitCode::from(fvlab_cli::run(fvlab_cli::Cli::parse()))
}
