//! Synthetic multi-task data.
//!
//! Every sample has a latent `z ~ N(0, I)`. Visual token `n` is
//! `P_n·z + noise` with a basis `P` shared by all tasks. Task `i` reads its
//! targets from `u = M_i·z`, where `M_i = cos θ_i·M_shared + sin θ_i·M⊥_i`:
//! the shared part spans one half of target space and each task-private part
//! the other half, so `θ_i` sets how far a task pulls away from the others.

use std::fmt;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::BBox;
use crate::numerics::{Matrix, Rng};

pub const N_CLASSES: usize = 4;
pub const TOKEN_POSITIONS: usize = 3;
pub const VOCAB: usize = 4;
/// Width of the task target pre-map `u`.
pub const TARGET_DIM: usize = 12;
const SHARED_DIM: usize = TARGET_DIM / 2;

/// Text-level task identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Qa,
    Vqa,
    Caption,
    Refer,
    Identify,
    Cls,
}

impl TaskTag {
    pub const ALL: [TaskTag; 6] = [
        TaskTag::Qa,
        TaskTag::Vqa,
        TaskTag::Caption,
        TaskTag::Refer,
        TaskTag::Identify,
        TaskTag::Cls,
    ];

    pub fn index(self) -> usize {
        TaskTag::ALL.iter().position(|t| *t == self).expect("listed")
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskTag::Qa => "[qa]",
            TaskTag::Vqa => "[vqa]",
            TaskTag::Caption => "[caption]",
            TaskTag::Refer => "[refer]",
            TaskTag::Identify => "[identify]",
            TaskTag::Cls => "[cls]",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Classification,
    BboxRegression,
    TokenMatch,
}

impl HeadKind {
    pub fn metric_name(self) -> &'static str {
        match self {
            HeadKind::Classification => "accuracy",
            HeadKind::BboxRegression => "iou",
            HeadKind::TokenMatch => "bleu1",
        }
    }
}

fn default_volume() -> u64 {
    1
}

fn default_visual() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub tag: TaskTag,
    pub head: HeadKind,
    #[serde(default = "default_volume")]
    pub volume: u64,
    /// Radians between this task's target map and the shared map.
    #[serde(default)]
    pub conflict_angle: f64,
    /// Overrides the suite noise scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// Text-only tasks bypass the connector.
    #[serde(default = "default_visual")]
    pub visual: bool,
}

impl TaskSpec {
    pub fn new(id: &str, tag: TaskTag, head: HeadKind) -> Self {
        TaskSpec {
            id: id.into(),
            tag,
            head,
            volume: 1,
            conflict_angle: 0.0,
            noise: None,
            visual: true,
        }
    }

    pub fn with_volume(mut self, v: u64) -> Self {
        self.volume = v;
        self
    }

    pub fn with_angle(mut self, a: f64) -> Self {
        self.conflict_angle = a;
        self
    }
}

fn default_n_visual() -> usize {
    16
}
fn default_d_visual() -> usize {
    16
}
fn default_d_latent() -> usize {
    8
}
fn default_noise() -> f64 {
    0.1
}
fn default_eval_samples() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default = "default_n_visual")]
    pub n_visual_tokens: usize,
    #[serde(default = "default_d_visual")]
    pub d_visual: usize,
    #[serde(default = "default_d_latent")]
    pub d_latent: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    pub tasks: Vec<TaskSpec>,
}

impl SuiteConfig {
    pub fn new(tasks: Vec<TaskSpec>) -> Self {
        SuiteConfig {
            n_visual_tokens: default_n_visual(),
            d_visual: default_d_visual(),
            d_latent: default_d_latent(),
            noise: default_noise(),
            eval_samples: default_eval_samples(),
            tasks,
        }
    }
}

/// Per-sample supervision.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    /// Box code in [-1, 1]^4, see [`decode_box`].
    Code([f64; 4]),
    Tokens([usize; TOKEN_POSITIONS]),
}

/// Model output decoded into the task's answer space.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Class(usize),
    Box(BBox),
    Tokens(Vec<usize>),
}

impl Target {
    /// The answer a perfect model would give.
    pub fn as_prediction(&self) -> Prediction {
        match self {
            Target::Class(c) => Prediction::Class(*c),
            Target::Code(c) => Prediction::Box(decode_box(c)),
            Target::Tokens(t) => Prediction::Tokens(t.to_vec()),
        }
    }
}

/// Centre `(50 + 25c₀, 50 + 25c₁)`, size `(30 + 20c₂, 30 + 20c₃)`; stays
/// inside the 100×100 grid for any code in [-1, 1]^4.
pub fn decode_box(code: &[f64; 4]) -> BBox {
    let c = code.map(|v| v.clamp(-1.0, 1.0));
    let (cx, cy) = (50.0 + 25.0 * c[0], 50.0 + 25.0 * c[1]);
    let (w, h) = (30.0 + 20.0 * c[2], 30.0 + 20.0 * c[3]);
    BBox {
        xmin: (cx - w / 2.0).clamp(0.0, 100.0),
        ymin: (cy - h / 2.0).clamp(0.0, 100.0),
        xmax: (cx + w / 2.0).clamp(0.0, 100.0),
        ymax: (cy + h / 2.0).clamp(0.0, 100.0),
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Reads a model output row (width [`TARGET_DIM`]) as a prediction for `head`.
pub fn decode_output(head: HeadKind, row: &[f64]) -> Prediction {
    match head {
        HeadKind::Classification => Prediction::Class(argmax(&row[..N_CLASSES])),
        HeadKind::BboxRegression => Prediction::Box(decode_box(&[row[0], row[1], row[2], row[3]])),
        HeadKind::TokenMatch => Prediction::Tokens(row.chunks(VOCAB).take(TOKEN_POSITIONS).map(argmax).collect()),
    }
}

/// One task's batch: `features` stacks each sample's `N_v` token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub task: String,
    pub features: Matrix,
    pub targets: Vec<Target>,
}

impl SyntheticBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Loss target: one-hot rows, box codes, or one one-hot row per token position.
    pub fn target_matrix(&self) -> Matrix {
        let b = self.targets.len();
        match self.targets.first() {
            Some(Target::Code(_)) => {
                let mut m = Matrix::zeros(b, 4);
                for (i, t) in self.targets.iter().enumerate() {
                    if let Target::Code(c) = t {
                        m.row_mut(i).copy_from_slice(c);
                    }
                }
                m
            }
            Some(Target::Tokens(_)) => {
                let mut m = Matrix::zeros(b * TOKEN_POSITIONS, VOCAB);
                for (i, t) in self.targets.iter().enumerate() {
                    if let Target::Tokens(ts) = t {
                        for (p, &tok) in ts.iter().enumerate() {
                            m.set(i * TOKEN_POSITIONS + p, tok, 1.0);
                        }
                    }
                }
                m
            }
            _ => {
                let mut m = Matrix::zeros(b, N_CLASSES);
                for (i, t) in self.targets.iter().enumerate() {
                    if let Target::Class(c) = t {
                        m.set(i, *c, 1.0);
                    }
                }
                m
            }
        }
    }
}

/// Latent draws behind a batch, independent of the task reading them.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    /// B×d_z.
    pub z: Matrix,
    /// (B·N_v)×D_v standard normal noise.
    pub eps: Matrix,
}

#[derive(Debug, Clone)]
pub struct TaskSuite {
    pub cfg: SuiteConfig,
    /// d_z × (N_v·D_v); row-major reshape of `z·basis` gives the token grid.
    basis: Matrix,
    /// Per task, d_z × TARGET_DIM so that `u = z·map`.
    maps: Vec<Matrix>,
}

/// Orthonormal columns from Gram-Schmidt on a Gaussian square matrix.
fn random_orthonormal(n: usize, rng: &mut Rng) -> Matrix {
    loop {
        let g = rng.normal_matrix(n, n, 1.0);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut ok = true;
        for j in 0..n {
            let mut v: Vec<f64> = (0..n).map(|i| g.get(i, j)).collect();
            for q in &cols {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(q) {
                    *a -= d * b;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
        if ok {
            let mut q = Matrix::zeros(n, n);
            for (j, c) in cols.iter().enumerate() {
                for (i, &x) in c.iter().enumerate() {
                    q.set(i, j, x);
                }
            }
            return q;
        }
    }
}

/// `d_z × TARGET_DIM` map whose image lies in the span of `q`'s columns `cols`,
/// scaled so `E|u|² = TARGET_DIM` (unit variance per target coordinate).
fn map_in_subspace(q: &Matrix, cols: std::ops::Range<usize>, d_z: usize, rng: &mut Rng) -> Matrix {
    let coef = rng.normal_matrix(d_z, cols.len(), 1.0);
    let mut m = Matrix::zeros(d_z, TARGET_DIM);
    for r in 0..d_z {
        for (k, c) in cols.clone().enumerate() {
            let a = coef.get(r, k);
            for i in 0..TARGET_DIM {
                m.set(r, i, m.get(r, i) + a * q.get(i, c));
            }
        }
    }
    let norm = m.frobenius_norm();
    m.scale((TARGET_DIM as f64).sqrt() / norm)
}

pub fn make_task_suite(cfg: &SuiteConfig, rng: &mut Rng) -> Result<TaskSuite> {
    if cfg.tasks.is_empty() {
        return Err(LabError::contract("task suite needs at least one task"));
    }
    for (i, t) in cfg.tasks.iter().enumerate() {
        if cfg.tasks[..i].iter().any(|o| o.id == t.id) {
            return Err(LabError::contract(format!("duplicate task id {}", t.id)));
        }
        if t.volume == 0 {
            return Err(LabError::contract(format!("task {} has zero data volume", t.id)));
        }
        if !t.conflict_angle.is_finite() || t.noise.is_some_and(|n| !(n >= 0.0 && n.is_finite())) {
            return Err(LabError::contract(format!(
                "task {} has a non-finite generator setting",
                t.id
            )));
        }
    }
    if cfg.n_visual_tokens == 0 || cfg.d_visual == 0 || cfg.d_latent == 0 {
        return Err(LabError::contract("suite dimensions must be positive"));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(LabError::contract("suite noise must be finite and non-negative"));
    }
    let d_z = cfg.d_latent;
    let basis = rng.normal_matrix(d_z, cfg.n_visual_tokens * cfg.d_visual, 1.0 / (d_z as f64).sqrt());
    let q = random_orthonormal(TARGET_DIM, rng);
    let shared = map_in_subspace(&q, 0..SHARED_DIM, d_z, rng);
    let maps = cfg
        .tasks
        .iter()
        .map(|t| {
            let private = map_in_subspace(&q, SHARED_DIM..TARGET_DIM, d_z, rng);
            let (s, c) = t.conflict_angle.sin_cos();
            shared.scale(c).add(&private.scale(s)).expect("same shape")
        })
        .collect();
    Ok(TaskSuite {
        cfg: cfg.clone(),
        basis,
        maps,
    })
}

impl TaskSuite {
    pub fn tasks(&self) -> &[TaskSpec] {
        &self.cfg.tasks
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.cfg.tasks.iter().map(|t| t.id.clone()).collect()
    }

    pub fn task_index(&self, id: &str) -> Result<usize> {
        self.cfg
            .tasks
            .iter()
            .position(|t| t.id == id)
            .ok_or_else(|| LabError::contract(format!("unknown task id {id}")))
    }

    pub fn latents(&self, batch: usize, rng: &mut Rng) -> Latents {
        Latents {
            z: rng.normal_matrix(batch, self.cfg.d_latent, 1.0),
            eps: rng.normal_matrix(batch * self.cfg.n_visual_tokens, self.cfg.d_visual, 1.0),
        }
    }

    /// The batch task `task` sees for the given latents.
    pub fn materialize(&self, task: usize, lat: &Latents) -> SyntheticBatch {
        let spec = &self.cfg.tasks[task];
        let b = lat.z.rows();
        let noise = spec.noise.unwrap_or(self.cfg.noise);
        let clean = lat
            .z
            .matmul(&self.basis)
            .and_then(|m| m.reshaped(b * self.cfg.n_visual_tokens, self.cfg.d_visual))
            .expect("suite shapes agree");
        let features = clean.add(&lat.eps.scale(noise)).expect("suite shapes agree");
        let u = lat.z.matmul(&self.maps[task]).expect("suite shapes agree");
        let targets = (0..b)
            .map(|i| {
                let row = u.row(i);
                match spec.head {
                    HeadKind::Classification => Target::Class(argmax(&row[..N_CLASSES])),
                    HeadKind::BboxRegression => {
                        Target::Code([row[0].tanh(), row[1].tanh(), row[2].tanh(), row[3].tanh()])
                    }
                    HeadKind::TokenMatch => {
                        let mut t = [0; TOKEN_POSITIONS];
                        for (p, chunk) in row.chunks(VOCAB).take(TOKEN_POSITIONS).enumerate() {
                            t[p] = argmax(chunk);
                        }
                        Target::Tokens(t)
                    }
                }
            })
            .collect();
        SyntheticBatch {
            task: spec.id.clone(),
            features,
            targets,
        }
    }

    pub fn batch(&self, task: usize, size: usize, rng: &mut Rng) -> SyntheticBatch {
        let lat = self.latents(size, rng);
        self.materialize(task, &lat)
    }
}

/// Draws task indices with probability proportional to data volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ProportionalSampler {
    cumulative: Vec<u64>,
}

impl ProportionalSampler {
    pub fn new(volumes: &[u64]) -> Result<Self> {
        let mut acc = 0u64;
        let cumulative: Vec<u64> = volumes
            .iter()
            .map(|&v| {
                acc += v;
                acc
            })
            .collect();
        if acc == 0 {
            return Err(LabError::contract("sampler needs a positive total volume"));
        }
        Ok(ProportionalSampler { cumulative })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total = *self.cumulative.last().expect("non-empty") as f64;
        let mut prev = 0;
        self.cumulative
            .iter()
            .map(|&c| {
                let p = (c - prev) as f64 / total;
                prev = c;
                p
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let r = rng.below(total as usize) as u64;
        self.cumulative.partition_point(|&c| c <= r)
    }
}

pub fn proportional_sampler(suite: &TaskSuite) -> Result<ProportionalSampler> {
    ProportionalSampler::new(&suite.cfg.tasks.iter().map(|t| t.volume).collect::<Vec<_>>())
}
