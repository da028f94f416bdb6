use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::harness::{ModelConfig, SuiteConfig, TrainConfig, Watched};

fn default_batches() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default = "default_batches")]
    pub batches_per_task: usize,
    #[serde(default)]
    pub watched: Watched,
    /// Iteration whose parameters the diagnostics read; the final model when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_iter: Option<u64>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            batches_per_task: default_batches(),
            watched: Watched::default(),
            snapshot_iter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub suite: SuiteConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(v: serde_json::Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            LabError::Json(j) => LabError::config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    /// Checks every cross-field constraint without running anything.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: LabError| match e {
            LabError::Contract(m) => LabError::config(m),
            other => other,
        };
        self.train.validate().map_err(wrap)?;
        if self.diagnostics.batches_per_task < 2 {
            return Err(LabError::config("diagnostics.batches_per_task must be >= 2"));
        }
        if let Some(s) = self.diagnostics.snapshot_iter {
            if s == 0 || s > self.train.total_iters {
                return Err(LabError::config(format!(
                    "diagnostics.snapshot_iter {s} outside 1..={}",
                    self.train.total_iters
                )));
            }
        }
        if self.suite.eval_samples == 0 {
            return Err(LabError::config("suite.eval_samples must be >= 1"));
        }
        crate::harness::make_task_suite(&self.suite, &mut crate::numerics::Rng::new(0)).map_err(wrap)?;
        crate::harness::Model::new(&self.model, &self.suite).map_err(wrap)?;
        Ok(())
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub name: String,
    /// JSON merge patch applied to the base config.
    #[serde(default)]
    pub overrides: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub base: ExperimentConfig,
    pub cells: Vec<GridCell>,
    /// Name of the cell every other cell is compared against.
    pub baseline: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl GridConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let g: GridConfig = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            LabError::Json(j) => LabError::config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() || self.seeds.is_empty() {
            return Err(LabError::config("grid needs at least one cell and one seed"));
        }
        for (i, c) in self.cells.iter().enumerate() {
            let safe = !c.name.is_empty()
                && c.name
                    .chars()
                    .all(|ch| ch.is_ascii_alphanumeric() || "-_.".contains(ch))
                && c.name != "."
                && c.name != "..";
            if !safe {
                return Err(LabError::config(format!(
                    "cell name {:?} is not a plain file name",
                    c.name
                )));
            }
            if self.cells[..i].iter().any(|o| o.name == c.name) {
                return Err(LabError::config(format!("duplicate cell {}", c.name)));
            }
            self.cell_config(i)?;
        }
        if !self.cells.iter().any(|c| c.name == self.baseline) {
            return Err(LabError::contract(format!(
                "baseline cell {} is not in the grid",
                self.baseline
            )));
        }
        Ok(())
    }

    /// Base config with cell `i`'s overrides merged in.
    pub fn cell_config(&self, i: usize) -> Result<ExperimentConfig> {
        let mut doc = serde_json::to_value(&self.base)?;
        json_patch::merge(&mut doc, &self.cells[i].overrides);
        ExperimentConfig::from_value(doc).map_err(|e| match e {
            LabError::Json(j) => LabError::config(format!("cell {}: {j}", self.cells[i].name)),
            LabError::Config(m) => LabError::config(format!("cell {}: {m}", self.cells[i].name)),
            other => other,
        })
    }
}
