use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedapa::config::ExperimentConfig;
use fedapa::runner::{run_experiment, RunError};
use fedapa::summary::print_summary;
use fedapa_core::federation::Mode;

#[derive(Parser)]
#[command(name = "fedapa", version, about = "Federated learning with adaptive prototype aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// Config file (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `mode`.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Overrides `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run clients one after another instead of on the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment (the default).
    Run,
    /// Print the resolved config without running.
    Config,
    /// Print the result table for finished run directories.
    Summary { dirs: Vec<PathBuf> },
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, RunError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.mode {
        cfg.mode = Mode::parse(m).map_err(|e| fedapa::ConfigError::Invalid {
            key: "mode".into(),
            message: e.to_string(),
        })?;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.sequential {
        cfg.parallel = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command.as_ref().unwrap_or(&Command::Run) {
        Command::Summary { dirs } => match print_summary(dirs) {
            Ok(table) => {
                print!("{table}");
                Ok(())
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(3);
            }
        },
        Command::Config => resolve(&cli).map(|cfg| print!("{}", cfg.to_text())),
        Command::Run => resolve(&cli).and_then(|cfg| {
            let outcome = run_experiment(&cfg)?;
            print!("{}", fedapa::summary::format_table(&[outcome.summary]));
            eprintln!("wrote {}", outcome.out_dir.display());
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
