//! Scalar and row kernels shared by the tape and by the pure router functions.

/// √(2/π), used by the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh GELU approximation.
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Softmax over the entries of `row` where `keep` is true (all when `None`);
/// dropped entries are written as exact zeros. Uses max subtraction over the
/// kept entries and sums in index order.
pub fn softmax_row_into(row: &[f64], keep: Option<&[bool]>, out: &mut [f64]) {
    let kept = |i: usize| keep.is_none_or(|k| k[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in row.iter().enumerate() {
        if kept(i) && x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for (i, (&x, o)) in row.iter().zip(out.iter_mut()).enumerate() {
        *o = if kept(i) { (x - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Top-`k` mask of a row; ties go to the lowest index.
pub fn top_k_mask(row: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let mut mask = vec![false; row.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

/// sigmoid(row) / Σ sigmoid(row).
pub fn sigmoid_normalize_into(row: &[f64], out: &mut [f64]) {
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = sigmoid(x);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
