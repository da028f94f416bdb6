use std::collections::BTreeMap;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::suite::{proportional_sampler, TaskSuite};
use crate::error::{LabError, Result};
use crate::numerics::{adamw_step, AdamWConfig, AdamWState, Graph, LrSchedule, ParamStore, Rng, Stream};

fn default_total() -> u64 {
    5000
}
fn default_warmup() -> u64 {
    500
}
fn default_batch() -> usize {
    4
}
fn default_peak() -> f64 {
    1e-3
}
fn default_min() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_total")]
    pub total_iters: u64,
    #[serde(default = "default_warmup")]
    pub warmup_iters: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_peak")]
    pub peak_lr: f64,
    #[serde(default = "default_min")]
    pub min_lr: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: default_total(),
            warmup_iters: default_warmup(),
            batch_size: default_batch(),
            peak_lr: default_peak(),
            min_lr: default_min(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters > self.total_iters {
            return Err(LabError::contract(format!(
                "warmup_iters {} exceeds total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(LabError::contract("batch_size must be >= 1"));
        }
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0 && self.peak_lr.is_finite() && self.min_lr.is_finite()) {
            return Err(LabError::contract("learning rates must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_iters: self.warmup_iters,
            total_iters: self.total_iters,
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LogRow {
    pub iteration: u64,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
}

/// Trains `store` in place for `cfg.total_iters` iterations. Each iteration
/// draws a task in proportion to its volume and one batch of that task.
/// `hook` runs after every update with the iteration number.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    suite: &TaskSuite,
    cfg: &TrainConfig,
    seed: u64,
    mut hook: impl FnMut(u64, &ParamStore) -> Result<()>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let schedule = cfg.schedule();
    let sampler = proportional_sampler(suite)?;
    let mut task_rng = Rng::stream(seed, Stream::Sampler);
    let mut data_rng = Rng::stream(seed, Stream::Data);
    let mut states: BTreeMap<String, AdamWState> = BTreeMap::new();
    let mut log = Vec::with_capacity(cfg.total_iters as usize);
    for iter in 1..=cfg.total_iters {
        let lr = schedule.lr_at(iter)?;
        let task = sampler.sample(&mut task_rng);
        let batch = suite.batch(task, cfg.batch_size, &mut data_rng);
        let (loss, grads) = {
            let mut g = Graph::new(store);
            let (loss, _) = model.loss(&mut g, &batch)?;
            let value = g.tape.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(LabError::numeric(format!(
                    "loss became {value} at iteration {iter} (task {})",
                    batch.task
                )));
            }
            g.tape.backward(loss)?;
            (value, g.reached_grads())
        };
        for (name, grad) in grads {
            let state = states
                .entry(name.clone())
                .or_insert_with(|| AdamWState::new(grad.rows(), grad.cols(), cfg.optimizer));
            let updated = adamw_step(store.get(&name)?, &grad, state, lr)
                .map_err(|e| LabError::numeric(format!("iteration {iter}, parameter {name}: {e}")))?;
            store.set(&name, updated)?;
        }
        log.push(LogRow {
            iteration: iter,
            task: batch.task,
            loss,
            lr,
        });
        hook(iter, store)?;
    }
    Ok(log)
}
