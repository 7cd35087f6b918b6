use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = modclass_cli::Cli::parse();
    let result = modclass_cli::configure_threads().and_then(|_| modclass_cli::run(cli));
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
