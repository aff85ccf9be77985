//! Batch front-end for the rod-limit engine.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{Ctx, RunSettings};
use crate::output::{Artifacts, RunInfo};

#[derive(Parser)]
#[command(name = "rodlimit", version, about = "Thin-rod limit models: sections, cell problems, rod solutions and convergence studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for random probe samples (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for 3D quadrature; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// `check` repeats every 3D quadrature at doubled order and flags disagreement.
    #[arg(long, global = true, value_enum, default_value_t = QuadratureMode::Normal)]
    quadrature: QuadratureMode,
}

#[derive(Subcommand, Clone, Copy, Debug)]
enum Command {
    /// Section moments and torsional rigidity.
    Section,
    /// Cell-problem tables Q0 and the 4x4 cell data.
    Cell,
    /// Minimize the rod energy under the configured loads.
    Reduce,
    /// Convergence study of recovery sequences.
    Gamma,
    /// Convergence study of the periodic recovery on a closed curve.
    Ring,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum QuadratureMode {
    Normal,
    Check,
}

fn run(cli: &Cli) -> Result<PathBuf, (u8, anyhow::Error)> {
    let path = cli.config.as_ref().ok_or_else(|| (2, anyhow::anyhow!("--config <path> is required")))?;
    let cfg = config::load(path).map_err(|e| (2, e.into()))?;
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| (2, anyhow::anyhow!("no output directory: pass --out or set `out` in the config")))?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let hash = cfg.hash();
    let ctx = Ctx {
        cfg: &cfg,
        hash: hash.clone(),
        settings: RunSettings { seed, threads: cli.threads, self_check: cli.quadrature == QuadratureMode::Check },
    };
    let numerical = |e: anyhow::Error| (1, e);
    let mut art = Artifacts::new(&out_dir).map_err(numerical)?;
    let name = match cli.command {
        Command::Section => commands::section(&ctx, &mut art).map(|_| "section"),
        Command::Cell => commands::cell(&ctx, &mut art).map(|_| "cell"),
        Command::Reduce => commands::reduce(&ctx, &mut art).map(|_| "reduce"),
        Command::Gamma => commands::gamma(&ctx, &mut art, false).map(|_| "gamma"),
        Command::Ring => commands::gamma(&ctx, &mut art, true).map(|_| "ring"),
    }
    .map_err(numerical)?;
    art.finish(RunInfo {
        tool: "rodlimit",
        version: env!("CARGO_PKG_VERSION"),
        core_version: rodlimit::VERSION,
        subcommand: name.to_string(),
        config_sha256: hash,
        seed,
        threads: cli.threads,
        quadrature: format!("{:?}", cli.quadrature).to_lowercase(),
    })
    .map_err(numerical)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err((code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
