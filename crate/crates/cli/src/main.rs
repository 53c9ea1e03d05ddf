use std::path::PathBuf;
use std::process::ExitCode;

use af_horizon::{run, Format, RunConfig, Stage};
use clap::Parser;

/// ECG-based AF risk prediction and time-to-event analysis.
#[derive(Debug, Parser)]
#[command(name = "af-horizon", version)]
struct Cli {
    /// Stage to run.
    #[arg(value_enum)]
    stage: Stage,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Optional renderings to emit.
    #[arg(long, value_enum, global = true)]
    format: Option<Format>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    };
    let result = cfg.and_then(|mut cfg| {
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(o) = &cli.out {
            cfg.paths.out_dir = o.clone();
        }
        if let Some(f) = cli.format {
            cfg.report.format = f;
        }
        run(cli.stage, cfg.resolve())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("af-horizon: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
