//! `invariance-lab`: checks invariance of closed sets under controlled
//! stochastic and deterministic dynamics along independent routes and audits
//! that the verdicts agree.
//!
//! Exit codes: 0 = success / consistent verdicts, 1 = usage or config error,
//! 2 = the audit found inconsistent verdicts.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Config, ConfigError};

#[derive(Parser)]
#[command(
    name = "invariance-lab",
    about = "Invariance checks for controlled stochastic and deterministic systems",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file (required unless --system supplies a catalog run).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Catalog system name; overrides the config `system` field.
    #[arg(long, global = true)]
    system: Option<String>,

    /// Catalog set name; overrides the config `set` field.
    #[arg(long, global = true)]
    set: Option<String>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; reports are byte-identical for any value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Output directory for reports (default: config `out`, else invlab-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run analytic and dynamic invariance checks and audit their agreement.
    Audit,
    /// Simulate trajectories and export them as CSV.
    Simulate,
    /// Smoothed-noise convergence table over a list of m values.
    Wz,
    /// Check the coefficient-inequality conclusions and run the falsifier.
    Lemma,
    /// Sample expansion remainders and test their decay.
    Taylor,
    /// Monte-Carlo discounted-cost bound check.
    Hjb,
}

fn run() -> Result<i32, ConfigError> {
    let cli = Cli::try_parse().map_err(|e| ConfigError(format!("usage: {e}")))?;
    if cli.threads == 0 {
        return Err(ConfigError("--threads must be ≥ 1".into()));
    }
    // ignore the error if a pool already exists (e.g. in-process reuse)
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global();

    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None if cli.system.is_some() => Config::empty(),
        None => {
            return Err(ConfigError(
                "missing required option --config (or --system for a catalog run)".into(),
            ))
        }
    };
    if let Some(name) = &cli.system {
        cfg.set_catalog_system(name);
    }
    if let Some(name) = &cli.set {
        cfg.set_catalog_set(name);
    }
    let seed = cfg.seed(cli.seed)?;
    let out = commands::default_out_dir(cli.out.clone(), &cfg);

    match cli.command {
        Command::Audit => commands::cmd_audit(&cfg, seed, &out),
        Command::Simulate => commands::cmd_simulate(&cfg, seed, &out),
        Command::Wz => commands::cmd_wz(&cfg, seed, &out),
        Command::Lemma => commands::cmd_lemma(&cfg, seed, &out),
        Command::Taylor => commands::cmd_taylor(&cfg, seed, &out),
        Command::Hjb => commands::cmd_hjb(&cfg, seed, &out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
