use std::process::ExitCode;

use clap::Parser;
use dds_cli::{run, Cli};

fn main() -> ExitCode {
    // Usage errors are invalid input (1), not clap's default 2, which the
    // exit-code contract reserves for transport and auth failures.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli, std::env::var("DDS_SERVER").ok(), &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dds: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
