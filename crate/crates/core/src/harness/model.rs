//! The end-to-end toy model: resampler, connector, and a small language head.
//!
//! The head sees one sample as its aligned visual tokens flattened into a row
//! plus a one-hot task tag, runs two GELU layers (LoRA-adaptable) and a
//! trainable readout of width [`TARGET_DIM`]. Each head kind reads its own
//! slice of that readout.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::suite::{
    decode_output, HeadKind, Prediction, SuiteConfig, SyntheticBatch, TaskSpec, TaskTag, N_CLASSES, TARGET_DIM,
    TOKEN_POSITIONS, VOCAB,
};
use crate::connector::{BaselineKind, Cmoe, CmoeConfig, Connector, Resampler, ResamplerConfig};
use crate::error::{LabError, Result};
use crate::lora::{AdaptedLinear, LoraMode};
use crate::numerics::{Graph, Linear, Matrix, ParamStore, Rng, Var};
use crate::routers::{RouterKind, RouterWeights};

pub const HEAD_PREFIX: &str = "llm.";
/// Readout init scale; small so untrained outputs sit near zero.
pub const READOUT_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConnectorConfig {
    Linear,
    Mlp {
        #[serde(default)]
        hidden: Option<usize>,
    },
    Cmoe(CmoeConfig),
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        ConnectorConfig::Cmoe(CmoeConfig::default())
    }
}

fn default_d_text() -> usize {
    32
}
fn default_head_hidden() -> usize {
    128
}
fn default_lora() -> LoraMode {
    LoraMode::Lora { rank: 8, alpha: 8.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_d_text")]
    pub d_text: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default)]
    pub resampler: ResamplerConfig,
    #[serde(default)]
    pub connector: ConnectorConfig,
    #[serde(default = "default_lora")]
    pub lora: LoraMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_text: default_d_text(),
            head_hidden: default_head_hidden(),
            resampler: ResamplerConfig::default(),
            connector: ConnectorConfig::default(),
            lora: default_lora(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub n_visual: usize,
    pub d_visual: usize,
    /// Aggregated tokens per sample.
    pub tokens: usize,
    pub resampler: Resampler,
    pub connector: Connector,
    pub l1: AdaptedLinear,
    pub l2: AdaptedLinear,
    pub readout: Linear,
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// B×TARGET_DIM.
    pub out: Var,
    /// (B·T)×N routing weights when the connector is a CMoE and the task is visual.
    pub routing: Option<Var>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, suite: &SuiteConfig) -> Result<Self> {
        cfg.resampler.validate(suite.n_visual_tokens)?;
        if cfg.d_text == 0 || cfg.head_hidden == 0 {
            return Err(LabError::contract("model widths must be positive"));
        }
        let resampler = Resampler::new(cfg.resampler, suite.d_visual);
        let d_ag = resampler.out_dim();
        let visual_ids: Vec<String> = suite.tasks.iter().filter(|t| t.visual).map(|t| t.id.clone()).collect();
        let connector = match cfg.connector {
            ConnectorConfig::Linear => Connector::baseline(BaselineKind::Linear, d_ag, cfg.d_text, None),
            ConnectorConfig::Mlp { hidden } => Connector::baseline(BaselineKind::Mlp, d_ag, cfg.d_text, hidden),
            ConnectorConfig::Cmoe(c) => Connector::Cmoe(Cmoe::new(c, d_ag, cfg.d_text, &visual_ids)?),
        };
        let tokens = cfg.resampler.tokens_out(suite.n_visual_tokens);
        let d_head_in = tokens * cfg.d_text + TaskTag::ALL.len();
        let l1 = AdaptedLinear::new(&format!("{HEAD_PREFIX}l1"), d_head_in, cfg.head_hidden, cfg.lora)?;
        let l2 = AdaptedLinear::new(&format!("{HEAD_PREFIX}l2"), cfg.head_hidden, cfg.head_hidden, cfg.lora)?;
        let readout = Linear::new(format!("{HEAD_PREFIX}out"), cfg.head_hidden, TARGET_DIM);
        Ok(Model {
            cfg: cfg.clone(),
            tasks: suite.tasks.clone(),
            n_visual: suite.n_visual_tokens,
            d_visual: suite.d_visual,
            tokens,
            resampler,
            connector,
            l1,
            l2,
            readout,
        })
    }

    pub fn init(&self, rng: &mut Rng) -> ParamStore {
        let mut store = ParamStore::new();
        self.resampler.init(&mut store, rng);
        self.connector.init(&mut store, rng);
        self.l1.init(&mut store, rng, None);
        self.l2.init(&mut store, rng, None);
        self.readout.init(&mut store, rng, Some(READOUT_STD), true);
        store
    }

    pub fn task(&self, id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| LabError::contract(format!("unknown task id {id}")))
    }

    pub fn router_kind(&self) -> Option<RouterKind> {
        match &self.connector {
            Connector::Cmoe(c) => Some(c.cfg.router),
            _ => None,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, batch: &SyntheticBatch) -> Result<ModelOutput> {
        let spec = self.task(&batch.task)?;
        let b = batch.len();
        let expect = (b * self.n_visual, self.d_visual);
        if batch.features.shape() != expect {
            return Err(LabError::dim(
                "model_forward",
                batch.features.shape_str(),
                format!("{}x{}", expect.0, expect.1),
            ));
        }
        let width = self.tokens * self.cfg.d_text;
        let (image, routing) = if spec.visual {
            let f_v = g.tape.constant(batch.features.clone());
            let f_ag = self.resampler.forward(g, f_v)?;
            let c = self.connector.forward(g, f_ag, &spec.id)?;
            (g.tape.reshape(c.aligned, b, width)?, c.routing)
        } else {
            (g.tape.constant(Matrix::zeros(b, width)), None)
        };
        let mut tag = Matrix::zeros(b, TaskTag::ALL.len());
        for r in 0..b {
            tag.set(r, spec.tag.index(), 1.0);
        }
        let tag = g.tape.constant(tag);
        let x = g.tape.concat_cols(image, tag)?;
        let h = self.l1.forward(g, x)?;
        let h = g.tape.gelu(h);
        let h = self.l2.forward(g, h)?;
        let h = g.tape.gelu(h);
        let out = self.readout.forward(g, h)?;
        Ok(ModelOutput { out, routing })
    }

    /// Mean loss over the batch for the batch's task.
    pub fn loss(&self, g: &mut Graph<'_>, batch: &SyntheticBatch) -> Result<(Var, ModelOutput)> {
        let o = self.forward(g, batch)?;
        let target = batch.target_matrix();
        let loss = match self.task(&batch.task)?.head {
            HeadKind::Classification => {
                let logits = g.tape.slice_cols(o.out, 0, N_CLASSES)?;
                g.tape.cross_entropy(logits, &target)?
            }
            HeadKind::BboxRegression => {
                let code = g.tape.slice_cols(o.out, 0, 4)?;
                g.tape.mse(code, &target)?
            }
            HeadKind::TokenMatch => {
                let logits = g.tape.reshape(o.out, batch.len() * TOKEN_POSITIONS, VOCAB)?;
                g.tape.cross_entropy(logits, &target)?
            }
        };
        Ok((loss, o))
    }

    /// Decoded predictions plus routing weights (if any).
    pub fn predict(
        &self,
        store: &ParamStore,
        batch: &SyntheticBatch,
    ) -> Result<(Vec<Prediction>, Option<RouterWeights>)> {
        let mut g = Graph::new(store);
        let o = self.forward(&mut g, batch)?;
        let head = self.task(&batch.task)?.head;
        let out = g.tape.value(o.out);
        if !out.is_finite() {
            return Err(LabError::numeric(format!(
                "non-finite model output on task {}",
                batch.task
            )));
        }
        let preds = (0..batch.len()).map(|r| decode_output(head, out.row(r))).collect();
        let routing = match (o.routing, self.router_kind()) {
            (Some(v), Some(kind)) => Some(RouterWeights {
                weights: g.tape.value(v).clone(),
                kind,
            }),
            _ => None,
        };
        Ok((preds, routing))
    }

    pub fn label(&self) -> String {
        format!("{}+{}", self.connector.label(), self.cfg.lora.label())
    }
}
