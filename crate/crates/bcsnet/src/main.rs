use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = bcsnet::cli::Cli::parse();
    match bcsnet::cli::run(cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::FAILURE
        }
    }
}
