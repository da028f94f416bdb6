//! Low-rank adapters on frozen linear layers, alone or as a routed mixture.
//!
//! A LoRA-MoE layer computes
//! `h = x·W0 + b0 + (alpha/r)·Σ_k R(x)_k·(x·A_k)·B_k`
//! with `W0`, `b0` frozen, `A_k ~ N(0, 0.02²)`, `B_k = 0` at construction and
//! `R` a sparse top-K router over the token.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{Graph, Linear, Matrix, ParamStore, Rng, Var};
use crate::routers::{RouterKind, RouterNet};

pub const LORA_A_STD: f64 = 0.02;

fn default_alpha() -> f64 {
    8.0
}

/// How the toy language head's linear layers are fine-tuned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema, Default)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LoraMode {
    /// Every weight trainable.
    #[default]
    None,
    Lora {
        rank: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    LoraMoe {
        rank: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
        n_experts: usize,
        top_k: usize,
    },
}

impl LoraMode {
    pub fn label(&self) -> String {
        match self {
            LoraMode::None => "full".into(),
            LoraMode::Lora { rank, .. } => format!("lora-r{rank}"),
            LoraMode::LoraMoe {
                rank, n_experts, top_k, ..
            } => format!("lora-moe-r{rank}-n{n_experts}-k{top_k}"),
        }
    }
}

/// One `A` (d_in×r), `B` (r×d_out) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    /// The `alpha` in `alpha/r`.
    pub alpha_scale: f64,
}

impl LoraExpert {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize, rank: usize, alpha_scale: f64) -> Result<Self> {
        let bound = d_in.min(d_out) / 2;
        if rank == 0 || rank > bound {
            return Err(LabError::contract(format!(
                "LoRA rank {rank} must lie in 1..={bound} for a {d_in}x{d_out} layer"
            )));
        }
        Ok(LoraExpert {
            name: name.into(),
            d_in,
            d_out,
            rank,
            alpha_scale,
        })
    }

    pub fn a_name(&self) -> String {
        format!("{}.a", self.name)
    }

    pub fn b_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn scale(&self) -> f64 {
        self.alpha_scale / self.rank as f64
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        store.insert(self.a_name(), rng.normal_matrix(self.d_in, self.rank, LORA_A_STD), true);
        store.insert(self.b_name(), Matrix::zeros(self.rank, self.d_out), true);
    }

    /// Unscaled low-rank path `(x·A)·B`.
    pub fn delta(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let a = g.param(&self.a_name())?;
        let b = g.param(&self.b_name())?;
        let xa = g.tape.matmul(x, a)?;
        g.tape.matmul(xa, b)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.rank + self.rank * self.d_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    None,
    Lora(LoraExpert),
    Moe {
        experts: Vec<LoraExpert>,
        router: RouterNet,
        top_k: usize,
    },
}

/// A linear layer with an optional adapter. With an adapter the base weights are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    pub base: Linear,
    pub adapter: Adapter,
}

/// Frozen base plus routed LoRA experts.
pub type LoraMoeLayer = AdaptedLinear;

impl AdaptedLinear {
    pub fn new(name: &str, d_in: usize, d_out: usize, mode: LoraMode) -> Result<Self> {
        let base = Linear::new(name, d_in, d_out);
        let adapter = match mode {
            LoraMode::None => Adapter::None,
            LoraMode::Lora { rank, alpha } => {
                Adapter::Lora(LoraExpert::new(format!("{name}.lora"), d_in, d_out, rank, alpha)?)
            }
            LoraMode::LoraMoe {
                rank,
                alpha,
                n_experts,
                top_k,
            } => {
                if n_experts == 0 || top_k == 0 || top_k > n_experts {
                    return Err(LabError::contract(format!(
                        "LoRA-MoE needs 1 <= top_k ({top_k}) <= experts ({n_experts})"
                    )));
                }
                let experts = (0..n_experts)
                    .map(|k| LoraExpert::new(format!("{name}.lora{k}"), d_in, d_out, rank, alpha))
                    .collect::<Result<Vec<_>>>()?;
                let router = RouterNet::new(&format!("{name}.lora_router"), d_in, n_experts, RouterKind::Sparse);
                Adapter::Moe { experts, router, top_k }
            }
        };
        Ok(AdaptedLinear { base, adapter })
    }

    pub fn is_frozen_base(&self) -> bool {
        !matches!(self.adapter, Adapter::None)
    }

    /// `base_std` is the base weight scale (1/√d_in when `None`).
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng, base_std: Option<f64>) {
        self.base.init(store, rng, base_std, !self.is_frozen_base());
        match &self.adapter {
            Adapter::None => {}
            Adapter::Lora(e) => e.init(store, rng),
            Adapter::Moe { experts, router, .. } => {
                for e in experts {
                    e.init(store, rng);
                }
                router.init(store, rng);
            }
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let d_in = g.tape.value(x).cols();
        if d_in != self.base.d_in {
            return Err(LabError::dim(
                "lora_moe_forward",
                format!("Tx{d_in}"),
                format!("Tx{}", self.base.d_in),
            ));
        }
        let h = self.base.forward(g, x)?;
        match &self.adapter {
            Adapter::None => Ok(h),
            Adapter::Lora(e) => {
                let d = e.delta(g, x)?;
                let d = g.tape.scale(d, e.scale());
                g.tape.add(h, d)
            }
            Adapter::Moe { experts, router, top_k } => {
                let w = router.route(g, x, *top_k)?;
                let deltas = experts.iter().map(|e| e.delta(g, x)).collect::<Result<Vec<_>>>()?;
                let mixed = g.tape.weighted_sum(&deltas, w)?;
                let mixed = g.tape.scale(mixed, experts[0].scale());
                g.tape.add(h, mixed)
            }
        }
    }

    /// Names of parameters the optimiser updates: adapters and router, or the
    /// base layer when there is no adapter.
    pub fn trainable_params(&self) -> Vec<String> {
        match &self.adapter {
            Adapter::None => vec![self.base.weight_name(), self.base.bias_name()],
            Adapter::Lora(e) => vec![e.a_name(), e.b_name()],
            Adapter::Moe { experts, router, .. } => {
                let mut v: Vec<String> = experts.iter().flat_map(|e| [e.a_name(), e.b_name()]).collect();
                for l in [&router.mlp.l1, &router.mlp.l2] {
                    v.push(l.weight_name());
                    v.push(l.bias_name());
                }
                v
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        match &self.adapter {
            Adapter::None => self.base.param_count(),
            Adapter::Lora(e) => e.param_count(),
            Adapter::Moe { experts, router, .. } => {
                experts.iter().map(LoraExpert::param_count).sum::<usize>() + router.param_count()
            }
        }
    }
}
