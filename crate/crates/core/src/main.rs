use std::process::ExitCode;

use clap::Parser;
use cmdiff::cli::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Help and version requests exit 0; malformed command lines exit 2.
    let cli = Cli::parse();
    match cli.command.resolve().and_then(|cfg| cfg.execute()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
