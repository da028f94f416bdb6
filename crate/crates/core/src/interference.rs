//! Multi-task gradient interference diagnostics.
//!
//! From per-(task, batch) gradients of a shared parameter set this module
//! builds the gradient-direction matrix `GD` (mean cosine of paired batch
//! gradients), the gradient-magnitude similarity `GM`, the per-task
//! tug-of-war indexes `Σ_j GD[i,j]·GM[i,j]`, and per-parameter statistics
//! scores `|Σ_i g_i| / Σ_i |g_i|` summarised as a ten-bin histogram.
//!
//! Reductions run task-major, batch-minor in a fixed order, so results do not
//! depend on how the samples were produced.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::Matrix;

pub use crate::harness::diagnostics::{collect_gradients, Watched};

/// Flattened gradient of the watched parameters for one (task, batch).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub task: String,
    pub batch: usize,
    pub grad: Vec<f64>,
    pub norm: f64,
}

impl GradientSample {
    pub fn new(task: impl Into<String>, batch: usize, grad: Vec<f64>) -> Result<Self> {
        let task = task.into();
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(LabError::numeric(format!(
                "non-finite gradient entry for task {task} batch {batch}"
            )));
        }
        let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(GradientSample {
            task,
            batch,
            grad,
            norm,
        })
    }
}

/// Samples regrouped as `per_task[i][b]`, batches sorted by index.
struct Grouped<'a> {
    tasks: Vec<String>,
    per_task: Vec<Vec<&'a GradientSample>>,
}

fn group(samples: &[GradientSample]) -> Result<Grouped<'_>> {
    let mut tasks: Vec<String> = Vec::new();
    let mut per_task: Vec<Vec<&GradientSample>> = Vec::new();
    let len = samples
        .first()
        .ok_or_else(|| LabError::contract("no gradient samples"))?
        .grad
        .len();
    for s in samples {
        if s.grad.len() != len {
            return Err(LabError::dim(
                "gradient samples",
                format!("length {len}"),
                format!("length {} ({} batch {})", s.grad.len(), s.task, s.batch),
            ));
        }
        match tasks.iter().position(|t| *t == s.task) {
            Some(i) => per_task[i].push(s),
            None => {
                tasks.push(s.task.clone());
                per_task.push(vec![s]);
            }
        }
    }
    for batches in &mut per_task {
        batches.sort_by_key(|s| s.batch);
    }
    let reference: Vec<usize> = per_task[0].iter().map(|s| s.batch).collect();
    if reference.len() < 2 {
        return Err(LabError::contract("need at least two batches per task"));
    }
    for (t, batches) in tasks.iter().zip(&per_task) {
        let idx: Vec<usize> = batches.iter().map(|s| s.batch).collect();
        if idx != reference {
            return Err(LabError::contract(format!(
                "task {t} batch indices do not pair with task {}",
                tasks[0]
            )));
        }
    }
    Ok(Grouped { tasks, per_task })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn nonzero_norm(s: &GradientSample) -> Result<f64> {
    if s.norm == 0.0 {
        return Err(LabError::numeric(format!(
            "zero-norm gradient for task {} batch {}",
            s.task, s.batch
        )));
    }
    Ok(s.norm)
}

/// Task order used by the matrix builders (first appearance).
pub fn task_order(samples: &[GradientSample]) -> Result<Vec<String>> {
    Ok(group(samples)?.tasks)
}

/// Paired-batch estimate: GD[i,j] = mean_b cos(g_i^b, g_j^b); diagonal exactly 1.
pub fn grad_direction_matrix(samples: &[GradientSample]) -> Result<Matrix> {
    let gr = group(samples)?;
    let t = gr.tasks.len();
    let b = gr.per_task[0].len();
    for batches in &gr.per_task {
        for s in batches {
            nonzero_norm(s)?;
        }
    }
    let mut gd = Matrix::identity(t);
    for i in 0..t {
        for j in i + 1..t {
            let mut acc = 0.0;
            for k in 0..b {
                let (si, sj) = (gr.per_task[i][k], gr.per_task[j][k]);
                acc += dot(&si.grad, &sj.grad) / (si.norm * sj.norm);
            }
            let v = (acc / b as f64).clamp(-1.0, 1.0);
            gd.set(i, j, v);
            gd.set(j, i, v);
        }
    }
    Ok(gd)
}

/// Mean gradient norm per task, in task order.
pub fn mean_norms(samples: &[GradientSample]) -> Result<Vec<f64>> {
    let gr = group(samples)?;
    Ok(gr
        .per_task
        .iter()
        .map(|bs| bs.iter().map(|s| s.norm).sum::<f64>() / bs.len() as f64)
        .collect())
}

/// GM[i,j] = 2·m_i·m_j / (m_i² + m_j²) with m the mean batch norm.
pub fn grad_magnitude_matrix(samples: &[GradientSample]) -> Result<Matrix> {
    let tasks = task_order(samples)?;
    let m = mean_norms(samples)?;
    for (task, &mi) in tasks.iter().zip(&m) {
        if mi == 0.0 {
            return Err(LabError::numeric(format!("task {task} has zero mean gradient norm")));
        }
    }
    Ok(magnitude_from_norms(&m))
}

/// GM from precomputed mean norms (all positive).
pub fn magnitude_from_norms(m: &[f64]) -> Matrix {
    let t = m.len();
    let mut gm = Matrix::identity(t);
    for i in 0..t {
        for j in i + 1..t {
            let v = 2.0 * m[i] * m[j] / (m[i] * m[i] + m[j] * m[j]);
            gm.set(i, j, v);
            gm.set(j, i, v);
        }
    }
    gm
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceMatrices {
    pub tasks: Vec<String>,
    pub gd: Matrix,
    pub gm: Matrix,
}

pub fn interference_matrices(samples: &[GradientSample]) -> Result<InterferenceMatrices> {
    Ok(InterferenceMatrices {
        tasks: task_order(samples)?,
        gd: grad_direction_matrix(samples)?,
        gm: grad_magnitude_matrix(samples)?,
    })
}

/// index_i = Σ_j GD[i,j]·GM[i,j].
pub fn tug_of_war_indexes(gd: &Matrix, gm: &Matrix) -> Result<Vec<f64>> {
    if gd.rows() != gd.cols() || gd.shape() != gm.shape() {
        return Err(LabError::dim("tug_of_war_indexes", gd.shape_str(), gm.shape_str()));
    }
    Ok((0..gd.rows())
        .map(|i| gd.row(i).iter().zip(gm.row(i)).map(|(a, b)| a * b).sum())
        .collect())
}

/// v / max|v|.
pub fn max_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let m = v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if m == 0.0 || !m.is_finite() {
        return Err(LabError::contract("max-normalisation needs a nonzero finite entry"));
    }
    Ok(v.iter().map(|x| x / m).collect())
}

/// Mean gradient per task over its batches, in task order.
pub fn per_task_mean_gradients(samples: &[GradientSample]) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let gr = group(samples)?;
    let means = gr
        .per_task
        .iter()
        .map(|bs| {
            let mut acc = vec![0.0; bs[0].grad.len()];
            for s in bs {
                for (a, g) in acc.iter_mut().zip(&s.grad) {
                    *a += g;
                }
            }
            acc.iter().map(|a| a / bs.len() as f64).collect()
        })
        .collect();
    Ok((gr.tasks, means))
}

/// Per-parameter |Σ_i g_i| / Σ_i |g_i|, clamped to [0,1]; 1 where every task's gradient is 0.
pub fn statistics_scores(per_task: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_task
        .first()
        .ok_or_else(|| LabError::contract("statistics scores need at least one task"))?;
    for (i, g) in per_task.iter().enumerate() {
        if g.len() != first.len() {
            return Err(LabError::dim(
                "statistics_scores",
                format!("task 0 length {}", first.len()),
                format!("task {i} length {}", g.len()),
            ));
        }
    }
    Ok((0..first.len())
        .map(|p| {
            let (mut sum, mut abs) = (0.0, 0.0);
            for g in per_task {
                sum += g[p];
                abs += g[p].abs();
            }
            if abs == 0.0 {
                1.0
            } else {
                (sum.abs() / abs).clamp(0.0, 1.0)
            }
        })
        .collect())
}

/// Counts over [0,0.1), …, [0.8,0.9), [0.9,1.0].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct StatScoreHistogram {
    pub counts: [usize; 10],
    pub total: usize,
}

impl StatScoreHistogram {
    pub fn proportions(&self) -> [f64; 10] {
        let mut p = [0.0; 10];
        for (o, &c) in p.iter_mut().zip(&self.counts) {
            *o = c as f64 / self.total as f64;
        }
        p
    }

    /// Share of parameters scoring in [0.8, 1.0].
    pub fn high_mass(&self) -> f64 {
        (self.counts[8] + self.counts[9]) as f64 / self.total as f64
    }
}

pub fn histogram_ten_bins(scores: &[f64]) -> Result<StatScoreHistogram> {
    if scores.is_empty() {
        return Err(LabError::contract("histogram of an empty score list"));
    }
    let mut counts = [0usize; 10];
    for (i, &s) in scores.iter().enumerate() {
        if !(0.0..=1.0).contains(&s) {
            return Err(LabError::contract(format!("score {s} at {i} outside [0,1]")));
        }
        counts[((s * 10.0).floor() as usize).min(9)] += 1;
    }
    Ok(StatScoreHistogram {
        counts,
        total: scores.len(),
    })
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}
