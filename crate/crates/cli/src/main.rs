//! `relsa`: experiment runner for the systolic-array reliability workbench.
//!
//! Every subcommand reads an optional JSON config (`--config`), writes its
//! tables and a `run.json` metadata file into `--out`, and on failure prints
//! one JSON error object to stderr and exits nonzero.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use relsa::Error;

use commands::Failure;
use config::{ExperimentConfig, SuiteKind};
use output::{Format, Outputs};

#[derive(Parser)]
#[command(name = "relsa", version, about = "Systolic-array reliability experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config, or a run.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Application-specific fmax: statistical aged timing vs the corner flow.
    Dta(Common),
    /// Timing error rates under weight reordering and channel clustering.
    Read(Common),
    /// Protected GEMM with a calibrated critical region.
    Abft(Common),
    /// Resilience characterization of the toy network.
    Inject(Common),
    /// Write a seeded synthetic workload suite.
    GenWorkload {
        #[command(flatten)]
        common: Common,
        /// Suite to generate; overrides the config.
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Kind {
    Dta,
    Read,
}

fn run<C, F>(name: &str, common: &Common, adjust: impl FnOnce(&mut C), body: F) -> Result<(), Failure>
where
    C: DeserializeOwned + Serialize + Default + Clone + ExperimentConfig,
    F: FnOnce(&C, &mut Outputs) -> Result<(), Failure>,
{
    let mut cfg: C = config::load(name, common.config.as_deref(), common.seed)?;
    adjust(&mut cfg);
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be positive").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let mut out = Outputs::new(&common.out, common.format);
    body(&cfg, &mut out)?;
    out.finish(name, &cfg)?;
    Ok(())
}

fn error_json(f: &Failure) -> serde_json::Value {
    let mut obj = serde_json::json!({
        "kind": f.error.kind(),
        "message": f.error.to_string(),
    });
    let path = match &f.error {
        Error::Io { path, .. } | Error::Json { path, .. } => Some(path.as_path()),
        _ => None,
    };
    if let Some(p) = path {
        obj["path"] = p.display().to_string().into();
    }
    if let Error::UnrecoverableFault { tile_id, rounds, .. } = &f.error {
        obj["tile_id"] = (*tile_id).into();
        obj["rounds"] = (*rounds).into();
    }
    if let Some(a) = &f.audit {
        obj["audit"] = Path::new(a).display().to_string().into();
    }
    serde_json::json!({ "error": obj })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Dta(c) => run("dta", c, |_| {}, |cfg, out| Ok(commands::dta(cfg, out)?)),
        Command::Read(c) => run("read", c, |_| {}, |cfg, out| Ok(commands::read(cfg, out)?)),
        Command::Abft(c) => run("abft", c, |_| {}, commands::abft),
        Command::Inject(c) => run("inject", c, |_| {}, |cfg, out| Ok(commands::inject(cfg, out)?)),
        Command::GenWorkload { common, kind } => run(
            "gen-workload",
            common,
            |cfg: &mut config::GenConfig| {
                if let Some(k) = kind {
                    cfg.kind = match k {
                        Kind::Dta => SuiteKind::Dta,
                        Kind::Read => SuiteKind::Read,
                    };
                }
            },
            |cfg, out| Ok(commands::gen_workload(cfg, out)?),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", error_json(&f));
            ExitCode::FAILURE
        }
    }
}
