//! Vision-to-language connectors.
//!
//! Visual tokens first pass a [`Resampler`] that merges `alpha` adjacent
//! tokens, then one of three connectors maps each aggregated token to the
//! language width: a single affine map, a two-layer perceptron, or the CMoE
//! mixture of projection experts combined by a router that can see the
//! token, a learned per-task token, or both.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{Activation, ActivationKind, Graph, Linear, Matrix, Mlp, ParamStore, PoolKind, Rng, Var};
use crate::routers::{constant_route, hard_route, RouterKind, RouterNet, RouterWeights};

/// Parameter-name prefix shared by everything in this module.
pub const PREFIX: &str = "connector.";

/// Standard deviation of freshly initialised task tokens.
pub const TASK_TOKEN_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMethod {
    #[default]
    Projection,
    MaxPool,
    AvgPool,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ResamplerConfig {
    pub alpha: usize,
    #[serde(default)]
    pub method: ResampleMethod,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        ResamplerConfig {
            alpha: 4,
            method: ResampleMethod::Projection,
        }
    }
}

impl ResamplerConfig {
    pub fn validate(&self, n_visual_tokens: usize) -> Result<()> {
        if self.alpha == 0 {
            return Err(LabError::contract("compression rate alpha must be >= 1"));
        }
        if self.method == ResampleMethod::None && self.alpha != 1 {
            return Err(LabError::contract("resampler method none requires alpha = 1"));
        }
        if !n_visual_tokens.is_multiple_of(self.alpha) {
            return Err(LabError::contract(format!(
                "{n_visual_tokens} visual tokens not divisible by alpha={}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Width of one aggregated token.
    pub fn out_dim(&self, d_v: usize) -> usize {
        match self.method {
            ResampleMethod::Projection => d_v * self.alpha,
            _ => d_v,
        }
    }

    pub fn tokens_out(&self, n_visual_tokens: usize) -> usize {
        n_visual_tokens / self.alpha
    }
}

/// Token aggregator. The projection variant concatenates `alpha` adjacent
/// tokens (a row-major reshape) and applies a learned square linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub cfg: ResamplerConfig,
    pub d_v: usize,
    pub proj: Option<Linear>,
}

impl Resampler {
    pub fn new(cfg: ResamplerConfig, d_v: usize) -> Self {
        let proj = (cfg.method == ResampleMethod::Projection)
            .then(|| Linear::new(format!("{PREFIX}resampler"), d_v * cfg.alpha, d_v * cfg.alpha));
        Resampler { cfg, d_v, proj }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        if let Some(p) = &self.proj {
            p.init(store, rng, None, true);
        }
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim(self.d_v)
    }

    /// `f_v` holds token rows, `alpha`-aligned (several samples may be stacked).
    pub fn forward(&self, g: &mut Graph<'_>, f_v: Var) -> Result<Var> {
        let (rows, cols) = g.tape.value(f_v).shape();
        if cols != self.d_v {
            return Err(LabError::dim(
                "resample",
                format!("{rows}x{cols}"),
                format!("Nx{}", self.d_v),
            ));
        }
        if rows % self.cfg.alpha != 0 {
            return Err(LabError::contract(format!(
                "{rows} visual tokens not divisible by alpha={}",
                self.cfg.alpha
            )));
        }
        let alpha = self.cfg.alpha;
        match self.cfg.method {
            ResampleMethod::None => Ok(f_v),
            ResampleMethod::MaxPool => g.tape.pool_rows(f_v, alpha, PoolKind::Max),
            ResampleMethod::AvgPool => g.tape.pool_rows(f_v, alpha, PoolKind::Avg),
            ResampleMethod::Projection => {
                let cat = g.tape.reshape(f_v, rows / alpha, cols * alpha)?;
                self.proj.as_ref().expect("projection layer").forward(g, cat)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingStrategy {
    Token,
    Task,
    #[default]
    #[serde(rename = "token&task")]
    TokenAndTask,
}

impl RoutingStrategy {
    pub fn uses_task_token(self) -> bool {
        matches!(self, RoutingStrategy::Task | RoutingStrategy::TokenAndTask)
    }
}

fn default_n_experts() -> usize {
    5
}
fn default_top_k() -> usize {
    2
}
fn default_router() -> RouterKind {
    RouterKind::SoftSoftmax
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CmoeConfig {
    #[serde(default = "default_n_experts")]
    pub n_experts: usize,
    #[serde(default = "default_router")]
    pub router: RouterKind,
    #[serde(default)]
    pub strategy: RoutingStrategy,
    /// Experts kept per token by the sparse router.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Expert hidden width; the aggregated-token width when absent.
    #[serde(default)]
    pub expert_hidden: Option<usize>,
    #[serde(default)]
    pub activation: ActivationKind,
}

impl Default for CmoeConfig {
    fn default() -> Self {
        CmoeConfig {
            n_experts: default_n_experts(),
            router: default_router(),
            strategy: RoutingStrategy::default(),
            top_k: default_top_k(),
            expert_hidden: None,
            activation: ActivationKind::Gelu,
        }
    }
}

/// Mixture of projection experts plus its router and task tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Cmoe {
    pub cfg: CmoeConfig,
    pub d_ag: usize,
    pub d_t: usize,
    pub experts: Vec<Mlp>,
    pub router: Option<RouterNet>,
    pub task_ids: Vec<String>,
}

impl Cmoe {
    pub fn new(cfg: CmoeConfig, d_ag: usize, d_t: usize, task_ids: &[String]) -> Result<Self> {
        if cfg.n_experts == 0 {
            return Err(LabError::contract("CMoE needs at least one expert"));
        }
        if cfg.router == RouterKind::Sparse && (cfg.top_k == 0 || cfg.top_k > cfg.n_experts) {
            return Err(LabError::contract(format!(
                "top_k {} outside 1..={}",
                cfg.top_k, cfg.n_experts
            )));
        }
        if cfg.router == RouterKind::Hard && task_ids.len() > cfg.n_experts {
            return Err(LabError::contract(format!(
                "hard router maps {} task types onto {} experts; it needs one expert per type",
                task_ids.len(),
                cfg.n_experts
            )));
        }
        let hidden = cfg.expert_hidden.unwrap_or(d_ag);
        let act: Activation = cfg.activation.into();
        let experts = (0..cfg.n_experts)
            .map(|k| Mlp::new(&format!("{PREFIX}expert{k}"), d_ag, hidden, d_t, act))
            .collect();
        let router = cfg.router.is_learned().then(|| {
            let d_in = match cfg.strategy {
                RoutingStrategy::TokenAndTask => 2 * d_ag,
                _ => d_ag,
            };
            RouterNet::new(&format!("{PREFIX}router"), d_in, cfg.n_experts, cfg.router)
        });
        Ok(Cmoe {
            cfg,
            d_ag,
            d_t,
            experts,
            router,
            task_ids: task_ids.to_vec(),
        })
    }

    pub fn task_token_name(task: &str) -> String {
        format!("{PREFIX}task_token.{task}")
    }

    fn needs_task_tokens(&self) -> bool {
        self.router.is_some() && self.cfg.strategy.uses_task_token()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for e in &self.experts {
            e.init(store, rng);
        }
        if let Some(r) = &self.router {
            r.init(store, rng);
        }
        if self.needs_task_tokens() {
            for t in &self.task_ids {
                store.insert(
                    Self::task_token_name(t),
                    rng.normal_matrix(1, self.d_ag, TASK_TOKEN_STD),
                    true,
                );
            }
        }
    }

    fn task_index(&self, task: &str) -> Result<usize> {
        self.task_ids
            .iter()
            .position(|t| t == task)
            .ok_or_else(|| LabError::contract(format!("unknown task id {task}")))
    }

    /// Returns the aligned tokens (T×D_t) and the T×N routing-weight node.
    pub fn forward(&self, g: &mut Graph<'_>, f_ag: Var, task: &str) -> Result<(Var, Var)> {
        let (t, d) = g.tape.value(f_ag).shape();
        if d != self.d_ag {
            return Err(LabError::dim(
                "cmoe_forward",
                format!("{t}x{d}"),
                format!("Tx{}", self.d_ag),
            ));
        }
        let task_idx = self.task_index(task)?;
        let weights = match (&self.router, self.cfg.router) {
            (None, RouterKind::Hard) => {
                let w = hard_route(&vec![task_idx; t], self.cfg.n_experts)?;
                g.tape.constant(w.weights)
            }
            (None, _) => g.tape.constant(constant_route(t, self.cfg.n_experts)?.weights),
            (Some(router), _) => {
                let input = match self.cfg.strategy {
                    RoutingStrategy::Token => f_ag,
                    RoutingStrategy::Task => {
                        let tok = g.param(&Self::task_token_name(task))?;
                        g.tape.repeat_rows(tok, t)?
                    }
                    RoutingStrategy::TokenAndTask => {
                        let tok = g.param(&Self::task_token_name(task))?;
                        let rep = g.tape.repeat_rows(tok, t)?;
                        g.tape.concat_cols(f_ag, rep)?
                    }
                };
                router.route(g, input, self.cfg.top_k)?
            }
        };
        let outs = self
            .experts
            .iter()
            .map(|e| e.forward(g, f_ag))
            .collect::<Result<Vec<_>>>()?;
        let out = g.tape.weighted_sum(&outs, weights)?;
        Ok((out, weights))
    }

    pub fn param_count(&self) -> usize {
        let experts: usize = self.experts.iter().map(Mlp::param_count).sum();
        let router = self.router.as_ref().map_or(0, RouterNet::param_count);
        let tokens = if self.needs_task_tokens() {
            self.task_ids.len() * self.d_ag
        } else {
            0
        };
        experts + router + tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Connector {
    Linear(Linear),
    Mlp(Mlp),
    Cmoe(Cmoe),
}

/// Output of one connector pass.
#[derive(Debug, Clone, Copy)]
pub struct ConnectorOutput {
    pub aligned: Var,
    /// T×N routing weights for CMoE connectors.
    pub routing: Option<Var>,
}

impl Connector {
    pub fn baseline(kind: BaselineKind, d_ag: usize, d_t: usize, hidden: Option<usize>) -> Self {
        match kind {
            BaselineKind::Linear => Connector::Linear(Linear::new(format!("{PREFIX}linear"), d_ag, d_t)),
            BaselineKind::Mlp => Connector::Mlp(Mlp::new(
                &format!("{PREFIX}mlp"),
                d_ag,
                hidden.unwrap_or(d_ag),
                d_t,
                Activation::Gelu,
            )),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        match self {
            Connector::Linear(l) => l.init(store, rng, None, true),
            Connector::Mlp(m) => m.init(store, rng),
            Connector::Cmoe(c) => c.init(store, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, f_ag: Var, task: &str) -> Result<ConnectorOutput> {
        match self {
            Connector::Cmoe(c) => {
                let (aligned, routing) = c.forward(g, f_ag, task)?;
                Ok(ConnectorOutput {
                    aligned,
                    routing: Some(routing),
                })
            }
            _ => Ok(ConnectorOutput {
                aligned: self.baseline_forward(g, f_ag)?,
                routing: None,
            }),
        }
    }

    /// Linear or MLP projection of aggregated tokens.
    pub fn baseline_forward(&self, g: &mut Graph<'_>, f_ag: Var) -> Result<Var> {
        let d_in = g.tape.value(f_ag).cols();
        match self {
            Connector::Linear(l) => {
                if d_in != l.d_in {
                    return Err(LabError::dim(
                        "baseline_forward",
                        format!("Tx{d_in}"),
                        format!("Tx{}", l.d_in),
                    ));
                }
                l.forward(g, f_ag)
            }
            Connector::Mlp(m) => {
                if d_in != m.l1.d_in {
                    return Err(LabError::dim(
                        "baseline_forward",
                        format!("Tx{d_in}"),
                        format!("Tx{}", m.l1.d_in),
                    ));
                }
                m.forward(g, f_ag)
            }
            Connector::Cmoe(_) => Err(LabError::contract("baseline_forward called on a CMoE connector")),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Connector::Linear(_) => "linear".into(),
            Connector::Mlp(_) => "mlp".into(),
            Connector::Cmoe(c) => format!("cmoe-{}", c.cfg.router.label()),
        }
    }
}

/// Mean routing weight per task and expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RoutingTable {
    pub tasks: Vec<String>,
    /// tasks × experts.
    pub weights: Vec<Vec<f64>>,
}

/// Averages routing weights over every token of every record, per task.
/// Tasks appear in first-seen order.
pub fn routing_summary(records: &[(String, RouterWeights)]) -> Result<RoutingTable> {
    let first = records
        .first()
        .ok_or_else(|| LabError::contract("routing summary needs at least one record"))?;
    let n = first.1.n_experts();
    let mut tasks: Vec<String> = Vec::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for (task, w) in records {
        if w.n_experts() != n {
            return Err(LabError::dim(
                "routing_summary",
                format!("N={n}"),
                format!("N={}", w.n_experts()),
            ));
        }
        let i = match tasks.iter().position(|t| t == task) {
            Some(i) => i,
            None => {
                tasks.push(task.clone());
                sums.push(vec![0.0; n]);
                counts.push(0);
                tasks.len() - 1
            }
        };
        for r in 0..w.tokens() {
            for (s, x) in sums[i].iter_mut().zip(w.weights.row(r)) {
                *s += x;
            }
        }
        counts[i] += w.tokens();
    }
    let weights = sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|x| x / c.max(1) as f64).collect())
        .collect();
    Ok(RoutingTable { tasks, weights })
}

/// Matrix view of a routing node's value, tagged with its kind.
pub fn router_weights(g: &Graph<'_>, routing: Var, kind: RouterKind) -> RouterWeights {
    RouterWeights {
        weights: g.tape.value(routing).clone(),
        kind,
    }
}

/// `f_v` as a constant leaf (visual features are inputs, never trained).
pub fn visual_input(g: &mut Graph<'_>, f_v: &Matrix) -> Var {
    g.tape.constant(f_v.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tasks(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn projection_shape() {
        let cfg = ResamplerConfig {
            alpha: 4,
            method: ResampleMethod::Projection,
        };
        let r = Resampler::new(cfg, 8);
        let mut store = ParamStore::new();
        r.init(&mut store, &mut Rng::new(0));
        let mut g = Graph::new(&store);
        let x = g.tape.constant(Matrix::filled(16, 8, 0.1));
        let y = r.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.value(y).shape(), (4, 32));
    }

    #[test]
    fn pooling_examples() {
        let store = ParamStore::new();
        let avg = Resampler::new(
            ResamplerConfig {
                alpha: 3,
                method: ResampleMethod::AvgPool,
            },
            2,
        );
        let mut g = Graph::new(&store);
        let x = g
            .tape
            .constant(Matrix::from_rows(&[[0.5, -1.0], [0.5, -1.0], [0.5, -1.0]]));
        let y = avg.forward(&mut g, x).unwrap();
        let v = g.tape.value(y);
        assert!((v.get(0, 0) - 0.5).abs() < 1e-15 && (v.get(0, 1) + 1.0).abs() < 1e-15);

        let max = Resampler::new(
            ResamplerConfig {
                alpha: 2,
                method: ResampleMethod::MaxPool,
            },
            2,
        );
        let x = g.tape.constant(Matrix::from_rows(&[[1.0, 5.0], [3.0, 2.0]]));
        let y = max.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.value(y), &Matrix::from_rows(&[[3.0, 5.0]]));
    }

    #[test]
    fn resampler_config_contracts() {
        let bad = ResamplerConfig {
            alpha: 3,
            method: ResampleMethod::Projection,
        };
        assert!(matches!(bad.validate(16), Err(LabError::Contract(_))));
        let none = ResamplerConfig {
            alpha: 2,
            method: ResampleMethod::None,
        };
        assert!(none.validate(16).is_err());
        let r = Resampler::new(bad, 4);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.tape.constant(Matrix::zeros(16, 4));
        assert!(matches!(r.forward(&mut g, x), Err(LabError::Contract(_))));
    }

    #[test]
    fn linear_identity_passthrough() {
        let c = Connector::baseline(BaselineKind::Linear, 3, 3, None);
        let mut store = ParamStore::new();
        store.insert("connector.linear.w", Matrix::identity(3), true);
        store.insert("connector.linear.b", Matrix::zeros(1, 3), true);
        let mut g = Graph::new(&store);
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.0, 3.0, 4.0]]);
        let xv = g.tape.constant(x.clone());
        let y = c.baseline_forward(&mut g, xv).unwrap();
        assert_eq!(g.tape.value(y), &x);
    }

    #[test]
    fn mlp_shape_for_any_t() {
        let c = Connector::baseline(BaselineKind::Mlp, 6, 4, None);
        let mut store = ParamStore::new();
        c.init(&mut store, &mut Rng::new(1));
        for t in [1, 3, 7] {
            let mut g = Graph::new(&store);
            let x = g.tape.constant(Matrix::filled(t, 6, 0.2));
            let y = c.baseline_forward(&mut g, x).unwrap();
            assert_eq!(g.tape.value(y).shape(), (t, 4));
        }
        let mut g = Graph::new(&store);
        let x = g.tape.constant(Matrix::zeros(2, 5));
        assert!(matches!(c.baseline_forward(&mut g, x), Err(LabError::Dimension { .. })));
    }

    fn cmoe(router: RouterKind, strategy: RoutingStrategy, n: usize, seed: u64) -> (Cmoe, ParamStore) {
        let cfg = CmoeConfig {
            n_experts: n,
            router,
            strategy,
            ..Default::default()
        };
        let c = Cmoe::new(cfg, 6, 4, &tasks(3)).unwrap();
        let mut store = ParamStore::new();
        c.init(&mut store, &mut Rng::new(seed));
        (c, store)
    }

    #[test]
    fn constant_router_identical_experts() {
        let (c, mut store) = cmoe(RouterKind::Constant, RoutingStrategy::Token, 3, 2);
        for k in 1..3 {
            for suffix in ["l1.w", "l1.b", "l2.w", "l2.b"] {
                let v = store.get(&format!("connector.expert0.{suffix}")).unwrap().clone();
                store.set(&format!("connector.expert{k}.{suffix}"), v).unwrap();
            }
        }
        let mut g = Graph::new(&store);
        let x = g.tape.constant(Matrix::filled(5, 6, 0.3));
        let (out, _) = c.forward(&mut g, x, "t1").unwrap();
        let single = c.experts[0].forward(&mut g, x).unwrap();
        assert!(g.tape.value(out).max_abs_diff(g.tape.value(single)) < 1e-12);
    }

    #[test]
    fn hard_router_selects_task_expert() {
        let (c, store) = cmoe(RouterKind::Hard, RoutingStrategy::Token, 3, 3);
        let mut g = Graph::new(&store);
        let x = g.tape.constant(Matrix::filled(4, 6, -0.4));
        let (out, _) = c.forward(&mut g, x, "t2").unwrap();
        let e2 = c.experts[2].forward(&mut g, x).unwrap();
        assert_eq!(g.tape.value(out), g.tape.value(e2));
    }

    #[test]
    fn task_strategy_rows_identical() {
        let (c, store) = cmoe(RouterKind::SoftSoftmax, RoutingStrategy::Task, 4, 4);
        let mut g = Graph::new(&store);
        let x = g.tape.constant(Rng::new(9).normal_matrix(5, 6, 1.0));
        let (_, w) = c.forward(&mut g, x, "t0").unwrap();
        let w = g.tape.value(w);
        for r in 1..5 {
            assert_eq!(w.row(r), w.row(0));
        }
    }

    #[test]
    fn unknown_task_rejected() {
        let (c, store) = cmoe(RouterKind::SoftSoftmax, RoutingStrategy::TokenAndTask, 2, 5);
        let mut g = Graph::new(&store);
        let x = g.tape.constant(Matrix::zeros(2, 6));
        assert!(matches!(c.forward(&mut g, x, "nope"), Err(LabError::Contract(_))));
        let y = g.tape.constant(Matrix::zeros(2, 5));
        assert!(matches!(c.forward(&mut g, y, "t0"), Err(LabError::Dimension { .. })));
    }

    #[test]
    fn hard_router_needs_expert_per_task() {
        let cfg = CmoeConfig {
            n_experts: 2,
            router: RouterKind::Hard,
            ..Default::default()
        };
        assert!(Cmoe::new(cfg, 4, 4, &tasks(3)).is_err());
    }

    #[test]
    fn routing_summary_examples() {
        let uni = RouterWeights {
            weights: Matrix::filled(3, 4, 0.25),
            kind: RouterKind::SoftSoftmax,
        };
        let t = routing_summary(&[("a".into(), uni)]).unwrap();
        assert_eq!(t.weights, vec![vec![0.25; 4]]);

        let r1 = RouterWeights {
            weights: Matrix::from_rows(&[[1.0, 0.0]]),
            kind: RouterKind::Hard,
        };
        let r2 = RouterWeights {
            weights: Matrix::from_rows(&[[0.0, 1.0]]),
            kind: RouterKind::Hard,
        };
        let t = routing_summary(&[("a".into(), r1), ("a".into(), r2)]).unwrap();
        assert_eq!(t.weights, vec![vec![0.5, 0.5]]);
        assert!(routing_summary(&[]).is_err());
    }
}
