use std::collections::BTreeMap;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::connector::RoutingTable;
use crate::error::{LabError, Result};
use crate::harness::{
    diagnose, evaluate, make_task_suite, routing_table, train, DiagnosticsReport, LogRow, MetricRow, Model, TaskSuite,
};
use crate::numerics::{ParamStore, Rng, Stream};
use crate::par::Mode;

pub const REPORT_FORMAT: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RoutingReport {
    /// Measured once warm-up ends.
    pub post_warmup: Option<RoutingTable>,
    #[serde(rename = "final")]
    pub final_: RoutingTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DeltaEntry {
    pub baseline: String,
    /// Total relative gain in percent.
    pub total: f64,
    /// Per-task relative gain in percent, in task order.
    pub per_task: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RunReport {
    pub versions: BTreeMap<String, String>,
    pub name: Option<String>,
    pub seed: u64,
    /// Grid cell index (0 for single runs); mixed into the initialisation stream.
    pub run_id: u64,
    pub model: String,
    pub trainable_params: usize,
    pub metrics: Vec<MetricRow>,
    pub delta: Option<DeltaEntry>,
    /// Mean training loss over the last (up to) 100 iterations.
    pub final_train_loss: f64,
    /// Iteration whose parameters the diagnostics were computed on.
    pub diagnostics_iteration: u64,
    pub diagnostics: DiagnosticsReport,
    pub routing: Option<RoutingReport>,
    pub config: ExperimentConfig,
}

impl RunReport {
    pub fn metric_values(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.value).collect()
    }
}

/// Everything a run produces, before anything is written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub checkpoint: ParamStore,
    pub snapshot: Option<(u64, ParamStore)>,
    pub log: Vec<LogRow>,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("cmoe-lab".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("report-format".to_string(), REPORT_FORMAT.to_string()),
    ])
}

/// Builds the suite and model a config describes, without initialising weights.
pub fn build(cfg: &ExperimentConfig) -> Result<(TaskSuite, Model)> {
    let suite = make_task_suite(&cfg.suite, &mut Rng::stream(cfg.seed, Stream::Suite))?;
    let model = Model::new(&cfg.model, &cfg.suite)?;
    Ok((suite, model))
}

pub fn run_experiment(cfg: &ExperimentConfig, run_id: u64, mode: Mode) -> Result<RunOutput> {
    cfg.validate()?;
    let seed = cfg.seed;
    let (suite, model) = build(cfg)?;
    let mut store = model.init(&mut Rng::for_run(seed, Stream::Init, run_id));
    let trainable_params = store.count_trainable(|_| true);

    let warmup = cfg.train.warmup_iters;
    let snap_at = cfg.diagnostics.snapshot_iter;
    let mut post_warmup = None;
    if warmup == 0 {
        post_warmup = routing_table(&model, &store, &suite, seed)?;
    }
    let mut snapshot = None;
    let log = train(&model, &mut store, &suite, &cfg.train, seed, |iter, s| {
        if iter == warmup {
            post_warmup = routing_table(&model, s, &suite, seed)?;
        }
        if Some(iter) == snap_at {
            snapshot = Some((iter, s.clone()));
        }
        Ok(())
    })?;

    let metrics = evaluate(&model, &store, &suite, seed)?;
    let routing = routing_table(&model, &store, &suite, seed)?.map(|final_| RoutingReport { post_warmup, final_ });
    let (diag_iter, diag_store) = match &snapshot {
        Some((i, s)) => (*i, s),
        None => (cfg.train.total_iters, &store),
    };
    let d = &cfg.diagnostics;
    let diagnostics = diagnose(
        &model,
        diag_store,
        &suite,
        d.batches_per_task,
        cfg.train.batch_size,
        d.watched,
        seed,
        mode,
    )?;
    let tail = &log[log.len().saturating_sub(100)..];
    let final_train_loss = if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
    };
    let report = RunReport {
        versions: versions(),
        name: cfg.name.clone(),
        seed,
        run_id,
        model: model.label(),
        trainable_params,
        metrics,
        delta: None,
        final_train_loss,
        diagnostics_iteration: diag_iter,
        diagnostics,
        routing,
        config: cfg.clone(),
    };
    Ok(RunOutput {
        report,
        checkpoint: store,
        snapshot,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DiagnoseReport {
    pub versions: BTreeMap<String, String>,
    pub seed: u64,
    pub model: String,
    pub diagnostics: DiagnosticsReport,
    pub config: ExperimentConfig,
}

/// Diagnostics for a saved checkpoint; shapes must match the config's model.
pub fn diagnose_checkpoint(checkpoint_json: &str, cfg: &ExperimentConfig, mode: Mode) -> Result<DiagnoseReport> {
    cfg.validate()?;
    let (suite, model) = build(cfg)?;
    let mut store = model.init(&mut Rng::new(0));
    store.load_checkpoint_json(checkpoint_json).map_err(|e| match e {
        LabError::Json(j) => LabError::contract(format!("checkpoint is not a parameter map: {j}")),
        other => other,
    })?;
    let d = &cfg.diagnostics;
    let diagnostics = diagnose(
        &model,
        &store,
        &suite,
        d.batches_per_task,
        cfg.train.batch_size,
        d.watched,
        cfg.seed,
        mode,
    )?;
    Ok(DiagnoseReport {
        versions: versions(),
        seed: cfg.seed,
        model: model.label(),
        diagnostics,
        config: cfg.clone(),
    })
}
