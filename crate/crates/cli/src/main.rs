//! `mixfbm`: diagnostics and density estimators for SDEs driven by two
//! completely correlated fractional Brownian motions.
//!
//! Exit status: 0 when every exercised check passes, 1 on invalid input or a
//! failing check, 2 when a computation fails.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use commands::{Command, Ctx};
use config::{Overrides, RunConfig};
use report::{Failure, RunDir, Summary};

#[derive(Debug, Parser)]
#[command(name = "mixfbm", version, about)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Run configuration (TOML, or JSON by extension).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, env = "MIXFBM_OUT_DIR")]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, env = "MIXFBM_WORKERS")]
    workers: Option<usize>,
    #[arg(long)]
    h1: Option<f64>,
    #[arg(long)]
    h2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    a1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    a2: Option<f64>,
    /// Horizon T0.
    #[arg(long)]
    t_end: Option<f64>,
    /// Grid size N.
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    n_paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            h1: self.h1,
            h2: self.h2,
            a1: self.a1,
            a2: self.a2,
            t_end: self.t_end,
            n_steps: self.n_steps,
            n_paths: self.n_paths,
            master_seed: self.seed,
            workers: self.workers,
            out_dir: self.out.clone(),
        }
    }
}

fn run(cli: &Cli) -> Result<Summary, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::validation("config", format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.overrides());
    let spec = cfg.resolve().map_err(|m| Failure::validation("config", m))?;
    if let Some(w) = cfg.workers {
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().map_err(|e| Failure::validation("workers", e))?;
    }
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("mixfbm-out").join(cli.command.name()));
    let dir = RunDir::create(&out)?;
    dir.write_text("config.resolved.toml", &cfg.to_toml()?)?;
    let mut ctx = Ctx { cfg, spec, dir, summary: Summary::new(&cli.command.name()) };
    let outcome = commands::run(cli.command, &mut ctx);
    if let Err(f) = &outcome {
        ctx.summary.passed = false;
        ctx.summary.info("error", f.to_string());
    }
    ctx.dir.write_json("summary.json", &ctx.summary)?;
    outcome?;
    eprintln!("mixfbm: wrote {}", ctx.dir.path().display());
    Ok(ctx.summary)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(summary) => {
            let failed = summary.failed();
            for (id, c) in &failed {
                eprintln!("mixfbm: check {id} failed: {}", c.detail);
            }
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(f) => {
            eprintln!("mixfbm: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
