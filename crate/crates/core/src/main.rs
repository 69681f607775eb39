use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use prunekit::cli::{resolve_config, run_command, Command};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Train,
    Prune,
    Oracle,
    Correlate,
    Flops,
}

/// Structured pruning with Taylor-expansion importance criteria.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    command: Cmd,
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set prune.criterion=taylor_fo`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let command = match args.command {
        Cmd::Train => Command::Train,
        Cmd::Prune => Command::Prune,
        Cmd::Oracle => Command::Oracle,
        Cmd::Correlate => Command::Correlate,
        Cmd::Flops => Command::Flops,
    };
    let result = resolve_config(args.config.as_deref(), &args.overrides)
        .and_then(|cfg| run_command(command, &cfg));
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
