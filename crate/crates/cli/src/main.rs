use std::process::ExitCode;

use clap::Parser;
use graspctx_cli::{run, Cli};
use serde_json::json;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let record = json!({
                "status": "error",
                "command": null,
                "kind": "usage",
                "message": e.render().to_string().trim(),
            });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    let command = cli.command.name();
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            let record = e.record(command);
            eprintln!("{record}");
            if cli.out.is_dir() {
                let _ = std::fs::write(cli.out.join("error.json"), format!("{record}\n"));
            }
            ExitCode::from(1)
        }
    }
}
