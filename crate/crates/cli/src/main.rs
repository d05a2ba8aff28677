use std::process::ExitCode;

use clap::Parser;

use gas_storage_cli::output::error_record;
use gas_storage_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let record = serde_json::to_string_pretty(&error_record(&e)).expect("json values serialize");
            let _ = std::fs::create_dir_all(&cli.global.out);
            if let Err(w) = std::fs::write(cli.global.out.join("error.json"), record + "\n") {
                eprintln!("could not write error record: {w}");
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
