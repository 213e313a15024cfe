use clap::Parser;
use mfeq::cli::{run, Cli};

fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(run(Cli::parse()))
}
