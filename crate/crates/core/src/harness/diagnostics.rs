//! Gradient collection and the interference report for a fixed snapshot.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::model::{Model, HEAD_PREFIX};
use super::suite::TaskSuite;
use crate::connector::PREFIX as CONNECTOR_PREFIX;
use crate::error::{LabError, Result};
use crate::interference::{
    grad_direction_matrix, grad_magnitude_matrix, histogram_ten_bins, max_normalize, mean_norms,
    per_task_mean_gradients, statistics_scores, tug_of_war_indexes, GradientSample, StatScoreHistogram,
};
use crate::numerics::{Graph, ParamStore, Rng, Stream};
use crate::par::{self, Mode};

/// Which shared parameters the gradients are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Watched {
    #[default]
    Connector,
    ConnectorHead,
}

impl Watched {
    pub fn includes(self, name: &str) -> bool {
        match self {
            Watched::Connector => name.starts_with(CONNECTOR_PREFIX),
            Watched::ConnectorHead => name.starts_with(CONNECTOR_PREFIX) || name.starts_with(HEAD_PREFIX),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCollection {
    pub samples: Vec<GradientSample>,
    /// Tasks whose watched gradient is zero by construction.
    pub excluded: Vec<String>,
    pub param_count: usize,
}

/// Per-(task, batch) flattened gradients of the watched trainable parameters.
/// Batch `b` draws its latents from a stream keyed by `(seed, b)`, so every
/// task sees the same inputs and differs only in its targets.
#[allow(clippy::too_many_arguments)]
pub fn collect_gradients(
    model: &Model,
    store: &ParamStore,
    suite: &TaskSuite,
    batches_per_task: usize,
    batch_size: usize,
    watched: Watched,
    seed: u64,
    mode: Mode,
) -> Result<GradientCollection> {
    if batches_per_task < 2 {
        return Err(LabError::contract("diagnostics need at least two batches per task"));
    }
    let names: Vec<String> = store
        .trainable_names()
        .into_iter()
        .filter(|n| watched.includes(n))
        .collect();
    let param_count: usize = names
        .iter()
        .map(|n| store.get(n).map(|m| m.len()))
        .sum::<Result<usize>>()?;
    if param_count == 0 {
        return Err(LabError::contract("no trainable parameters are watched"));
    }
    let (included, excluded): (Vec<usize>, Vec<usize>) =
        (0..suite.tasks().len()).partition(|&i| suite.tasks()[i].visual || watched == Watched::ConnectorHead);
    if included.is_empty() {
        return Err(LabError::contract("every task bypasses the watched parameters"));
    }
    let latents: Vec<_> = (0..batches_per_task)
        .map(|b| suite.latents(batch_size, &mut Rng::for_run(seed, Stream::Diagnostics, b as u64)))
        .collect();
    let jobs = included.len() * batches_per_task;
    let samples = par::map_indexed(mode, jobs, |j| {
        let task = included[j / batches_per_task];
        let b = j % batches_per_task;
        let batch = suite.materialize(task, &latents[b]);
        let mut g = Graph::new(store);
        let (loss, _) = model.loss(&mut g, &batch)?;
        g.tape.backward(loss)?;
        let grads = g.grads();
        let mut flat = Vec::with_capacity(param_count);
        for n in &names {
            flat.extend_from_slice(grads[n].data());
        }
        GradientSample::new(batch.task, b, flat)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(GradientCollection {
        samples,
        excluded: excluded.iter().map(|&i| suite.tasks()[i].id.clone()).collect(),
        param_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DiagnosticsReport {
    pub watched: Watched,
    pub batches_per_task: usize,
    pub param_count: usize,
    pub tasks: Vec<String>,
    pub excluded_tasks: Vec<String>,
    pub gd: Vec<Vec<f64>>,
    pub gm: Vec<Vec<f64>>,
    pub mean_norms: Vec<f64>,
    pub tug_of_war: Vec<f64>,
    pub tug_of_war_normalized: Vec<f64>,
    pub histogram: StatScoreHistogram,
}

fn rows(m: &crate::numerics::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn diagnostics_report(
    c: &GradientCollection,
    watched: Watched,
    batches_per_task: usize,
) -> Result<DiagnosticsReport> {
    let gd = grad_direction_matrix(&c.samples)?;
    let gm = grad_magnitude_matrix(&c.samples)?;
    let idx = tug_of_war_indexes(&gd, &gm)?;
    let (tasks, means) = per_task_mean_gradients(&c.samples)?;
    let histogram = histogram_ten_bins(&statistics_scores(&means)?)?;
    Ok(DiagnosticsReport {
        watched,
        batches_per_task,
        param_count: c.param_count,
        tasks,
        excluded_tasks: c.excluded.clone(),
        gd: rows(&gd),
        gm: rows(&gm),
        mean_norms: mean_norms(&c.samples)?,
        tug_of_war_normalized: max_normalize(&idx)?,
        tug_of_war: idx,
        histogram,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn diagnose(
    model: &Model,
    store: &ParamStore,
    suite: &TaskSuite,
    batches_per_task: usize,
    batch_size: usize,
    watched: Watched,
    seed: u64,
    mode: Mode,
) -> Result<DiagnosticsReport> {
    let c = collect_gradients(model, store, suite, batches_per_task, batch_size, watched, seed, mode)?;
    diagnostics_report(&c, watched, batches_per_task)
}
