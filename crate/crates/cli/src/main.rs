use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use hsrec_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HSREC_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::usage(e.to_string());
            eprint!("{e}");
            eprintln!("{}", err.trailer());
            return ExitCode::from(err.code as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            // a closed stdout (e.g. piped into head) is not an error
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {}", err.message);
            eprintln!("{}", err.trailer());
            ExitCode::from(err.code as u8)
        }
    }
}
