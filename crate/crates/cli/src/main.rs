use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use sehr_cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(out) => {
            if !out.text.is_empty() {
                let _ = writeln!(std::io::stdout().lock(), "{}", out.text.trim_end());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            ExitCode::from(e.code.exit_code() as u8)
        }
    }
}
