//! `reswidth`: run resonance-width experiments described by a JSON config.

mod config;
mod report;
mod stages;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::{ConfigError, Stage};

/// Worker threads for scan points and absorber runs.
const THREADS_VAR: &str = "RESWIDTH_THREADS";

#[derive(Parser)]
#[command(name = "reswidth", version, about = "Total and partial widths of auto-ionizing states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; replaces `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key.path=value`, value parsed as JSON; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Complex spectra of the N and N−1 sectors.
    Spectrum(Common),
    /// Resonance identification and total/partial widths for every absorber.
    Widths(Common),
    /// Lindblad propagation of the resonance against the rate equations.
    Propagate(Common),
    /// Widths along each absorber's scan grid.
    Scan(Common),
    /// Propagated purity against its closed form.
    Purity(Common),
    /// The stages listed under `run` in the config.
    Run(Common),
}

enum Failure {
    Config(ConfigError),
    Numerical(stages::StageError),
    Io(std::io::Error),
}

fn fail(f: Failure) -> ExitCode {
    let (code, body) = match &f {
        Failure::Config(e) => (2, json!({"stage": "config", "path": e.key_path(), "error": e.to_string()})),
        Failure::Numerical(e) => (3, json!({"stage": e.stage, "run": e.label, "error": e.source.to_string()})),
        Failure::Io(e) => (2, json!({"stage": "output", "error": e.to_string()})),
    };
    eprintln!("{body}");
    ExitCode::from(code)
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => Ok(v.parse::<usize>().map_err(|_| anyhow::anyhow!("{THREADS_VAR}={v} is not a count"))?.max(1)),
        Err(_) => Ok(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, only) = match cli.command {
        Command::Spectrum(c) => (c, Some(Stage::Spectrum)),
        Command::Widths(c) => (c, Some(Stage::Widths)),
        Command::Propagate(c) => (c, Some(Stage::Propagate)),
        Command::Scan(c) => (c, Some(Stage::Scan)),
        Command::Purity(c) => (c, Some(Stage::Purity)),
        Command::Run(c) => (c, None),
    };
    let mut cfg = match config::load(&common.config, &common.overrides) {
        Ok(c) => c,
        Err(e) => return fail(Failure::Config(e)),
    };
    if let Some(s) = only {
        cfg.run = vec![s];
    }
    if let Some(dir) = common.out {
        cfg.output.directory = dir;
    }
    let model = match cfg.validate() {
        Ok(m) => m,
        Err(e) => return fail(Failure::Config(e)),
    };
    let pool = match threads().and_then(|n| Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?)) {
        Ok(p) => p,
        Err(e) => {
            return fail(Failure::Config(ConfigError::Invalid { path: THREADS_VAR.into(), message: e.to_string() }));
        }
    };
    let stages: BTreeSet<Stage> = cfg.run.iter().copied().collect();
    let outcome = match stages::execute(&cfg, &model, &stages, &pool) {
        Ok(o) => o,
        Err(e) => return fail(Failure::Numerical(e)),
    };
    if let Err(e) = report::write_all(&cfg.output.directory, &outcome, cfg.output.pretty) {
        return fail(Failure::Io(e));
    }
    for c in &outcome.checks {
        println!("{} {}: {:.3e} (limit {:.1e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.limit);
    }
    println!("artifacts in {}", cfg.output.directory.display());
    if outcome.checks.iter().all(|c| c.pass) { ExitCode::SUCCESS } else { ExitCode::from(1) }
}
