use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cmoe_lab::experiment::{
    diagnose_checkpoint, run_experiment, run_grid, write_diagnose, write_grid, write_run, ExperimentConfig, GridConfig,
};
use cmoe_lab::par::{self, Mode};
use cmoe_lab::{LabError, Result};

const OUT_ENV: &str = "CMOE_LAB_OUT";
const DEFAULT_OUT: &str = "cmoe-lab-out";

#[derive(Parser)]
#[command(
    name = "cmoe-lab",
    version,
    about = "Train, ablate and diagnose CMoE connectors on synthetic multi-task suites"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args, Clone)]
struct Flags {
    /// Experiment seed (for grids: run this single seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (the CMOE_LAB_OUT environment variable takes precedence).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Compute diagnostics on the parameters at this iteration.
    #[arg(long, global = true)]
    snapshot_iter: Option<u64>,
    /// Gradient batches sampled per task for diagnostics.
    #[arg(long, global = true)]
    batches_per_task: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its report.
    Run { config: PathBuf },
    /// Run every cell of an ablation grid and summarise against the baseline cell.
    Grid { config: PathBuf },
    /// Recompute interference diagnostics for a saved checkpoint.
    Diagnose { checkpoint: PathBuf, config: PathBuf },
}

fn out_dir(flag: &Option<PathBuf>, from_config: &Option<String>) -> PathBuf {
    if let Some(env) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    flag.clone()
        .or_else(|| from_config.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn apply_flags(cfg: &mut ExperimentConfig, f: &Flags) -> Result<()> {
    if let Some(s) = f.seed {
        cfg.seed = s;
    }
    if let Some(s) = f.snapshot_iter {
        cfg.diagnostics.snapshot_iter = Some(s);
    }
    if let Some(b) = f.batches_per_task {
        cfg.diagnostics.batches_per_task = b;
    }
    cfg.validate()
}

fn jobs(f: &Flags) -> usize {
    f.jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn cmd_run(path: &Path, f: &Flags) -> Result<PathBuf> {
    let mut cfg = ExperimentConfig::load(path)?;
    apply_flags(&mut cfg, f)?;
    let dir = out_dir(&f.out, &cfg.out_dir);
    let out = par::with_jobs(jobs(f), || run_experiment(&cfg, 0, Mode::default()))?;
    write_run(&dir, &out)?;
    Ok(dir)
}

fn cmd_grid(path: &Path, f: &Flags) -> Result<PathBuf> {
    let mut grid = GridConfig::load(path)?;
    if let Some(s) = f.seed {
        grid.seeds = vec![s];
    }
    let mut diag = serde_json::Map::new();
    if let Some(s) = f.snapshot_iter {
        diag.insert("snapshot_iter".into(), json!(s));
    }
    if let Some(b) = f.batches_per_task {
        diag.insert("batches_per_task".into(), json!(b));
    }
    if !diag.is_empty() {
        let patch = json!({ "diagnostics": diag });
        for cell in &mut grid.cells {
            if cell.overrides.is_null() {
                cell.overrides = json!({});
            }
            json_patch::merge(&mut cell.overrides, &patch);
        }
    }
    grid.validate()?;
    let dir = out_dir(&f.out, &grid.out_dir);
    let out = run_grid(&grid, jobs(f), Mode::default())?;
    write_grid(&dir, &out)?;
    Ok(dir)
}

fn cmd_diagnose(ckpt: &Path, path: &Path, f: &Flags) -> Result<PathBuf> {
    let mut cfg = ExperimentConfig::load(path)?;
    apply_flags(&mut cfg, f)?;
    let text = std::fs::read_to_string(ckpt).map_err(|e| LabError::Io {
        path: ckpt.display().to_string(),
        source: e,
    })?;
    let dir = out_dir(&f.out, &cfg.out_dir);
    let rep = par::with_jobs(jobs(f), || diagnose_checkpoint(&text, &cfg, Mode::default()))?;
    write_diagnose(&dir, &rep)?;
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let f = &cli.flags;
    let result = match &cli.command {
        Command::Run { config } => cmd_run(config, f),
        Command::Grid { config } => cmd_grid(config, f),
        Command::Diagnose { checkpoint, config } => cmd_diagnose(checkpoint, config, f),
    };
    match result {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("cmoe-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
