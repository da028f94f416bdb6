use std::collections::BTreeMap;
use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::config::GridConfig;
use super::output::{ensure_dir, write_csv, write_json, write_run};
use super::run::{run_experiment, DeltaEntry, RunOutput};
use crate::error::{LabError, Result};
use crate::harness::delta_metric;
use crate::par::{self, Mode};

/// Mean and sample standard deviation (n−1; 0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SummaryRow {
    pub cell: String,
    /// A task id, or `total` for the aggregate Δ row.
    pub task: String,
    pub metric: String,
    pub seeds: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub delta_mean: f64,
    pub delta_std: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutput {
    pub cells: Vec<(String, Vec<RunOutput>)>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every cell × seed (up to `jobs` at once), fills each report's Δ
/// against the baseline cell at the same seed, and summarises.
pub fn run_grid(grid: &GridConfig, jobs: usize, mode: Mode) -> Result<GridOutput> {
    grid.validate()?;
    let n_seeds = grid.seeds.len();
    let configs = (0..grid.cells.len())
        .map(|i| grid.cell_config(i))
        .collect::<Result<Vec<_>>>()?;
    let work = grid.cells.len() * n_seeds;
    let results = par::with_jobs(jobs, || {
        par::map_indexed(mode, work, |j| {
            let (c, s) = (j / n_seeds, j % n_seeds);
            let mut cfg = configs[c].clone();
            cfg.seed = grid.seeds[s];
            run_experiment(&cfg, c as u64, mode)
        })
    });
    let mut flat = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut cells: Vec<(String, Vec<RunOutput>)> = Vec::with_capacity(grid.cells.len());
    for cell in grid.cells.iter().rev() {
        let runs = flat.split_off(flat.len() - n_seeds);
        cells.push((cell.name.clone(), runs));
    }
    cells.reverse();
    let base_idx = cells
        .iter()
        .position(|(n, _)| *n == grid.baseline)
        .ok_or_else(|| LabError::contract(format!("baseline cell {} missing", grid.baseline)))?;
    let baseline: Vec<Vec<f64>> = cells[base_idx].1.iter().map(|r| r.report.metric_values()).collect();
    for (_, runs) in &mut cells {
        for (s, run) in runs.iter_mut().enumerate() {
            let m = run.report.metric_values();
            let b = &baseline[s];
            let mut per_task = BTreeMap::new();
            for (k, row) in run.report.metrics.iter().enumerate() {
                per_task.insert(row.task.clone(), delta_metric(&m[k..=k], &b[k..=k])?);
            }
            run.report.delta = Some(DeltaEntry {
                baseline: grid.baseline.clone(),
                total: delta_metric(&m, b)?,
                per_task,
            });
        }
    }
    let summary = summarize(&cells);
    Ok(GridOutput { cells, summary })
}

fn summarize(cells: &[(String, Vec<RunOutput>)]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for (name, runs) in cells {
        let n = runs.len();
        for (k, m) in runs[0].report.metrics.iter().enumerate() {
            let vals: Vec<f64> = runs.iter().map(|r| r.report.metrics[k].value).collect();
            let deltas: Vec<f64> = runs
                .iter()
                .map(|r| r.report.delta.as_ref().map_or(0.0, |d| d.per_task[&m.task]))
                .collect();
            let (mean, std) = mean_std(&vals);
            let (delta_mean, delta_std) = mean_std(&deltas);
            rows.push(SummaryRow {
                cell: name.clone(),
                task: m.task.clone(),
                metric: m.metric.clone(),
                seeds: n,
                mean: Some(mean),
                std: Some(std),
                delta_mean,
                delta_std,
            });
        }
        let totals: Vec<f64> = runs
            .iter()
            .map(|r| r.report.delta.as_ref().map_or(0.0, |d| d.total))
            .collect();
        let (delta_mean, delta_std) = mean_std(&totals);
        rows.push(SummaryRow {
            cell: name.clone(),
            task: "total".into(),
            metric: "delta".into(),
            seeds: n,
            mean: None,
            std: None,
            delta_mean,
            delta_std,
        });
    }
    rows
}

/// `<dir>/<cell>/seed-<s>/…` per run plus `summary.csv` and `summary.json`.
pub fn write_grid(dir: &Path, out: &GridOutput) -> Result<()> {
    ensure_dir(dir)?;
    for (name, runs) in &out.cells {
        for run in runs {
            write_run(&dir.join(name).join(format!("seed-{}", run.report.seed)), run)?;
        }
    }
    let opt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
    let mut rows = vec![[
        "cell",
        "task",
        "metric",
        "seeds",
        "mean",
        "std",
        "delta_mean",
        "delta_std",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect::<Vec<_>>()];
    for r in &out.summary {
        rows.push(vec![
            r.cell.clone(),
            r.task.clone(),
            r.metric.clone(),
            r.seeds.to_string(),
            opt(r.mean),
            opt(r.std),
            format!("{}", r.delta_mean),
            format!("{}", r.delta_std),
        ]);
    }
    write_csv(&dir.join("summary.csv"), &rows)?;
    write_json(&dir.join("summary.json"), &out.summary)
}
