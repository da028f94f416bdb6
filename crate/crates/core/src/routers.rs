//! Routing networks: per-token expert weights for mixture-of-experts layers.
//!
//! Five routers are provided: constant (uniform weights), hard (one expert
//! per token type), sparse (softmax over the top-K scores), soft-sigmoid
//! (normalised sigmoids) and soft-softmax (plain row softmax). The pure
//! functions here work on plain matrices; [`route_scores`] applies the same
//! kernels on a tape so gradients flow into the scoring network.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{self, ops, Activation, Graph, Matrix, Mlp, ParamStore, Rng, Var};

/// Row sums must hit 1 within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum RouterKind {
    Constant,
    Hard,
    Sparse,
    SoftSigmoid,
    #[serde(rename = "soft")]
    SoftSoftmax,
}

impl RouterKind {
    /// Whether the router scores tokens with a learned network.
    pub fn is_learned(self) -> bool {
        matches!(
            self,
            RouterKind::Sparse | RouterKind::SoftSigmoid | RouterKind::SoftSoftmax
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            RouterKind::Constant => "constant",
            RouterKind::Hard => "hard",
            RouterKind::Sparse => "sparse",
            RouterKind::SoftSigmoid => "soft-sigmoid",
            RouterKind::SoftSoftmax => "soft",
        }
    }
}

/// tokens × N expert weights produced by one router.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterWeights {
    pub weights: Matrix,
    pub kind: RouterKind,
}

impl RouterWeights {
    pub fn tokens(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.weights.cols()
    }

    /// Checks the row invariants for this router kind. `top_k` bounds the
    /// nonzeros of sparse rows.
    pub fn validate(&self, top_k: Option<usize>) -> Result<()> {
        let n = self.n_experts();
        for r in 0..self.tokens() {
            let row = self.weights.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(LabError::numeric(format!("router row {r} sums to {sum}")));
            }
            if row.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                return Err(LabError::numeric(format!("router row {r} has entries outside [0,1]")));
            }
            let nonzero = row.iter().filter(|&&w| w != 0.0).count();
            match self.kind {
                RouterKind::Hard if nonzero != 1 || !row.contains(&1.0) => {
                    return Err(LabError::numeric(format!("hard router row {r} is not one-hot")));
                }
                RouterKind::Sparse if nonzero > top_k.unwrap_or(n) => {
                    return Err(LabError::numeric(format!(
                        "sparse router row {r} has {nonzero} nonzeros"
                    )));
                }
                RouterKind::Constant if row.iter().any(|&w| w != 1.0 / n as f64) => {
                    return Err(LabError::numeric(format!("constant router row {r} is not uniform")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub fn constant_route(tokens: usize, n_experts: usize) -> Result<RouterWeights> {
    if n_experts == 0 {
        return Err(LabError::contract("constant router needs at least one expert"));
    }
    Ok(RouterWeights {
        weights: Matrix::filled(tokens, n_experts, 1.0 / n_experts as f64),
        kind: RouterKind::Constant,
    })
}

/// One-hot rows at each token's type index.
pub fn hard_route(token_types: &[usize], n_experts: usize) -> Result<RouterWeights> {
    let mut weights = Matrix::zeros(token_types.len(), n_experts);
    for (t, &ty) in token_types.iter().enumerate() {
        if ty >= n_experts {
            return Err(LabError::contract(format!(
                "token {t} has type {ty} but only {n_experts} experts exist"
            )));
        }
        weights.set(t, ty, 1.0);
    }
    Ok(RouterWeights {
        weights,
        kind: RouterKind::Hard,
    })
}

fn check_finite(scores: &Matrix) -> Result<()> {
    if !scores.is_finite() {
        return Err(LabError::numeric("router scores contain non-finite values"));
    }
    Ok(())
}

/// Softmax over the top-`k` scores of each row; ties keep the lowest index.
pub fn sparse_route(scores: &Matrix, k: usize) -> Result<RouterWeights> {
    check_finite(scores)?;
    if k == 0 || k > scores.cols() {
        return Err(LabError::contract(format!("top-k {k} outside 1..={}", scores.cols())));
    }
    let mut weights = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let mask = ops::top_k_mask(scores.row(r), k);
        ops::softmax_row_into(scores.row(r), Some(&mask), weights.row_mut(r));
    }
    Ok(RouterWeights {
        weights,
        kind: RouterKind::Sparse,
    })
}

pub fn soft_route_sigmoid(scores: &Matrix) -> Result<RouterWeights> {
    check_finite(scores)?;
    if scores.cols() == 0 {
        return Err(LabError::contract("soft router needs at least one expert"));
    }
    let mut weights = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        ops::sigmoid_normalize_into(scores.row(r), weights.row_mut(r));
    }
    Ok(RouterWeights {
        weights,
        kind: RouterKind::SoftSigmoid,
    })
}

pub fn soft_route_softmax(scores: &Matrix) -> Result<RouterWeights> {
    check_finite(scores)?;
    if scores.cols() == 0 {
        return Err(LabError::contract("soft router needs at least one expert"));
    }
    Ok(RouterWeights {
        weights: numerics::softmax_masked(scores, None),
        kind: RouterKind::SoftSoftmax,
    })
}

/// out[t] = Σ_k weights[t,k]·expert_outputs[k][t].
pub fn moe_combine(expert_outputs: &[Matrix], weights: &RouterWeights) -> Result<Matrix> {
    let refs: Vec<&Matrix> = expert_outputs.iter().collect();
    numerics::combine(&refs, &weights.weights)
}

/// Applies a learned router's normalisation to a score node on the tape.
pub fn route_scores(g: &mut Graph<'_>, kind: RouterKind, scores: Var, top_k: usize) -> Result<Var> {
    match kind {
        RouterKind::Sparse => g.tape.top_k_softmax_rows(scores, top_k),
        RouterKind::SoftSigmoid => Ok(g.tape.sigmoid_normalize_rows(scores)),
        RouterKind::SoftSoftmax => Ok(g.tape.softmax_rows(scores)),
        RouterKind::Constant | RouterKind::Hard => Err(LabError::contract(format!(
            "{} router has no score network",
            kind.label()
        ))),
    }
}

/// The small scoring network `g`: a GELU two-layer perceptron from the router
/// input to one score per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterNet {
    pub mlp: Mlp,
    pub kind: RouterKind,
    pub n_experts: usize,
}

impl RouterNet {
    pub fn new(name: &str, d_in: usize, n_experts: usize, kind: RouterKind) -> Self {
        let hidden = (d_in / 4).max(4);
        RouterNet {
            mlp: Mlp::new(name, d_in, hidden, n_experts, Activation::Gelu),
            kind,
            n_experts,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.mlp.init(store, rng);
    }

    pub fn scores(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.mlp.forward(g, x)
    }

    /// Scores then normalises; returns the tokens × N weight node.
    pub fn route(&self, g: &mut Graph<'_>, x: Var, top_k: usize) -> Result<Var> {
        let s = self.scores(g, x)?;
        route_scores(g, self.kind, s, top_k)
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
}
