use std::process::ExitCode;

use clap::Parser;
use featsplat_cli::{run, Cli, EXIT_VALIDATION};

fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => run(cli),
        // usage errors are validation failures; help and version exit 0
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            }
        }
    }
}
