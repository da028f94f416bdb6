//! Report files: pretty JSON plus plot-ready CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::{DiagnoseReport, RunOutput};
use crate::connector::RoutingTable;
use crate::error::{LabError, Result};
use crate::harness::{DiagnosticsReport, LogRow, MetricRow};

pub const RUN_FILES: [&str; 9] = [
    "report.json",
    "checkpoint.json",
    "gd.csv",
    "gm.csv",
    "indexes.csv",
    "histogram.csv",
    "routing.csv",
    "metrics.csv",
    "trainlog.csv",
];

fn num(x: f64) -> String {
    format!("{x}")
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Writes `rows` (first row is the header) as RFC 4180 CSV.
pub fn write_csv(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    for r in rows {
        w.write_record(r)
            .map_err(|e| LabError::io(path, std::io::Error::other(e)))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| LabError::io(path, std::io::Error::other(e.to_string())))?;
    write_file(path, &bytes)
}

fn matrix_rows(tasks: &[String], m: &[Vec<f64>]) -> Vec<Vec<String>> {
    let mut rows = vec![std::iter::once("task".to_string())
        .chain(tasks.iter().cloned())
        .collect()];
    for (t, r) in tasks.iter().zip(m) {
        rows.push(std::iter::once(t.clone()).chain(r.iter().map(|&x| num(x))).collect());
    }
    rows
}

fn index_rows(d: &DiagnosticsReport) -> Vec<Vec<String>> {
    let mut rows = vec![vec![
        "task".to_string(),
        "tug_of_war".into(),
        "tug_of_war_normalized".into(),
        "mean_grad_norm".into(),
    ]];
    for (i, t) in d.tasks.iter().enumerate() {
        rows.push(vec![
            t.clone(),
            num(d.tug_of_war[i]),
            num(d.tug_of_war_normalized[i]),
            num(d.mean_norms[i]),
        ]);
    }
    rows
}

fn histogram_rows(d: &DiagnosticsReport) -> Vec<Vec<String>> {
    let mut rows = vec![vec![
        "bin_low".to_string(),
        "bin_high".into(),
        "count".into(),
        "proportion".into(),
    ]];
    let p = d.histogram.proportions();
    for (b, &c) in d.histogram.counts.iter().enumerate() {
        rows.push(vec![
            num(b as f64 / 10.0),
            num((b + 1) as f64 / 10.0),
            c.to_string(),
            num(p[b]),
        ]);
    }
    rows
}

fn routing_rows(post: Option<&RoutingTable>, fin: Option<&RoutingTable>) -> Vec<Vec<String>> {
    let n = fin.or(post).and_then(|t| t.weights.first()).map_or(0, Vec::len);
    let mut rows = vec![["phase".to_string(), "task".into()]
        .into_iter()
        .chain((0..n).map(|k| format!("expert{k}")))
        .collect::<Vec<_>>()];
    for (phase, table) in [("post-warmup", post), ("final", fin)] {
        if let Some(t) = table {
            for (task, w) in t.tasks.iter().zip(&t.weights) {
                rows.push(
                    [phase.to_string(), task.clone()]
                        .into_iter()
                        .chain(w.iter().map(|&x| num(x)))
                        .collect(),
                );
            }
        }
    }
    rows
}

fn metric_rows(metrics: &[MetricRow]) -> Vec<Vec<String>> {
    let mut rows = vec![vec![
        "task".to_string(),
        "head".into(),
        "metric".into(),
        "value".into(),
        "primary".into(),
    ]];
    for m in metrics {
        let head = serde_json::to_value(m.head)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        rows.push(vec![
            m.task.clone(),
            head.clone(),
            m.metric.clone(),
            num(m.value),
            "true".into(),
        ]);
        for (k, v) in &m.extras {
            rows.push(vec![m.task.clone(), head.clone(), k.clone(), num(*v), "false".into()]);
        }
    }
    rows
}

fn log_rows(log: &[LogRow]) -> Vec<Vec<String>> {
    let mut rows = vec![vec!["iteration".to_string(), "task".into(), "loss".into(), "lr".into()]];
    rows.extend(
        log.iter()
            .map(|r| vec![r.iteration.to_string(), r.task.clone(), num(r.loss), num(r.lr)]),
    );
    rows
}

fn write_diagnostics_tables(dir: &Path, d: &DiagnosticsReport) -> Result<()> {
    write_csv(&dir.join("gd.csv"), &matrix_rows(&d.tasks, &d.gd))?;
    write_csv(&dir.join("gm.csv"), &matrix_rows(&d.tasks, &d.gm))?;
    write_csv(&dir.join("indexes.csv"), &index_rows(d))?;
    write_csv(&dir.join("histogram.csv"), &histogram_rows(d))
}

/// Writes every run artefact into `dir` and returns the paths written.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let r = &out.report;
    write_json(&dir.join("report.json"), r)?;
    write_file(
        &dir.join("checkpoint.json"),
        out.checkpoint.to_checkpoint_json()?.as_bytes(),
    )?;
    write_diagnostics_tables(dir, &r.diagnostics)?;
    let (post, fin) = match &r.routing {
        Some(rr) => (rr.post_warmup.as_ref(), Some(&rr.final_)),
        None => (None, None),
    };
    write_csv(&dir.join("routing.csv"), &routing_rows(post, fin))?;
    write_csv(&dir.join("metrics.csv"), &metric_rows(&r.metrics))?;
    write_csv(&dir.join("trainlog.csv"), &log_rows(&out.log))?;
    let mut paths: Vec<PathBuf> = RUN_FILES.iter().map(|f| dir.join(f)).collect();
    if let Some((iter, s)) = &out.snapshot {
        let p = dir.join(format!("snapshot-{iter}.json"));
        write_file(&p, s.to_checkpoint_json()?.as_bytes())?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn write_diagnose(dir: &Path, rep: &DiagnoseReport) -> Result<()> {
    ensure_dir(dir)?;
    write_json(&dir.join("diagnostics.json"), rep)?;
    write_diagnostics_tables(dir, &rep.diagnostics)
}
