use std::collections::BTreeMap;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::suite::{HeadKind, Prediction, SyntheticBatch, Target, TaskSuite};
use crate::connector::{routing_summary, RoutingTable};
use crate::error::{LabError, Result};
use crate::metrics::{accuracy, bleu_n, iou, recall_at_05, word_f1};
use crate::numerics::{ParamStore, Rng, Stream};

/// One task's score: the head's primary metric plus secondary ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MetricRow {
    pub task: String,
    pub head: HeadKind,
    pub metric: String,
    pub value: f64,
    pub extras: BTreeMap<String, f64>,
}

/// Held-out samples for `task`; identical for every model evaluated with the same seed.
pub fn eval_batch(suite: &TaskSuite, task: usize, seed: u64) -> SyntheticBatch {
    let mut rng = Rng::for_run(seed, Stream::Eval, task as u64);
    suite.batch(task, suite.cfg.eval_samples.max(1), &mut rng)
}

fn token_words(t: &[usize]) -> Vec<String> {
    t.iter().map(|id| format!("t{id}")).collect()
}

fn mismatch(task: &str) -> LabError {
    LabError::contract(format!("prediction kind does not match the head of task {task}"))
}

pub fn score(task: &str, head: HeadKind, preds: &[Prediction], targets: &[Target]) -> Result<MetricRow> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(LabError::contract(format!(
            "{} predictions for {} targets on task {task}",
            preds.len(),
            targets.len()
        )));
    }
    let mut extras = BTreeMap::new();
    let value = match head {
        HeadKind::Classification => {
            let mut p = Vec::with_capacity(preds.len());
            let mut t = Vec::with_capacity(preds.len());
            for (pr, tg) in preds.iter().zip(targets) {
                match (pr, tg) {
                    (Prediction::Class(a), Target::Class(b)) => {
                        p.push(*a);
                        t.push(*b);
                    }
                    _ => return Err(mismatch(task)),
                }
            }
            accuracy(&p, &t)?
        }
        HeadKind::BboxRegression => {
            let mut ious = Vec::with_capacity(preds.len());
            for (pr, tg) in preds.iter().zip(targets) {
                match (pr, tg.as_prediction()) {
                    (Prediction::Box(a), Prediction::Box(b)) => ious.push(iou(a, &b)),
                    _ => return Err(mismatch(task)),
                }
            }
            extras.insert("r@0.5".to_string(), recall_at_05(&ious)?);
            ious.iter().sum::<f64>() / ious.len() as f64
        }
        HeadKind::TokenMatch => {
            let (mut bleu, mut f1) = (0.0, 0.0);
            for (pr, tg) in preds.iter().zip(targets) {
                match (pr, tg) {
                    (Prediction::Tokens(a), Target::Tokens(b)) => {
                        let (c, r) = (token_words(a), token_words(b));
                        bleu += bleu_n(&c, &r, 1);
                        f1 += word_f1(&c, &r);
                    }
                    _ => return Err(mismatch(task)),
                }
            }
            let n = preds.len() as f64;
            extras.insert("word_f1".to_string(), f1 / n);
            bleu / n
        }
    };
    Ok(MetricRow {
        task: task.to_string(),
        head,
        metric: head.metric_name().to_string(),
        value,
        extras,
    })
}

/// Scores any predictor on every task's held-out batch, in suite order.
pub fn evaluate_with(
    suite: &TaskSuite,
    seed: u64,
    mut predict: impl FnMut(&SyntheticBatch) -> Result<Vec<Prediction>>,
) -> Result<Vec<MetricRow>> {
    suite
        .tasks()
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let batch = eval_batch(suite, i, seed);
            let preds = predict(&batch)?;
            score(&spec.id, spec.head, &preds, &batch.targets)
        })
        .collect()
}

pub fn evaluate(model: &Model, store: &ParamStore, suite: &TaskSuite, seed: u64) -> Result<Vec<MetricRow>> {
    evaluate_with(suite, seed, |b| Ok(model.predict(store, b)?.0))
}

/// A predictor that reads the answers off the targets.
pub fn evaluate_oracle(suite: &TaskSuite, seed: u64) -> Result<Vec<MetricRow>> {
    evaluate_with(suite, seed, |b| {
        Ok(b.targets.iter().map(Target::as_prediction).collect())
    })
}

/// Mean routing weight per visual task and expert on the held-out batches;
/// `None` for connectors without a router.
pub fn routing_table(model: &Model, store: &ParamStore, suite: &TaskSuite, seed: u64) -> Result<Option<RoutingTable>> {
    if model.router_kind().is_none() {
        return Ok(None);
    }
    let mut records = Vec::new();
    for (i, spec) in suite.tasks().iter().enumerate() {
        if !spec.visual {
            continue;
        }
        let batch = eval_batch(suite, i, seed);
        if let (_, Some(w)) = model.predict(store, &batch)? {
            records.push((spec.id.clone(), w));
        }
    }
    if records.is_empty() {
        return Ok(None);
    }
    routing_summary(&records).map(Some)
}

/// Mean relative gain of `model` over `baseline`, in percent.
pub fn delta_metric(model: &[f64], baseline: &[f64]) -> Result<f64> {
    if model.len() != baseline.len() || model.is_empty() {
        return Err(LabError::contract(format!(
            "delta over {} model and {} baseline metrics",
            model.len(),
            baseline.len()
        )));
    }
    let mut acc = 0.0;
    for (i, (&m, &b)) in model.iter().zip(baseline).enumerate() {
        if b == 0.0 {
            return Err(LabError::contract(format!("baseline metric {i} is zero")));
        }
        acc += (m - b) / b;
    }
    Ok(acc / model.len() as f64 * 100.0)
}
