//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order of the graph. [`Tape::backward`] walks it in reverse,
//! applying each reachable node's rule exactly once.

use super::ops;
use super::Matrix;
use crate::error::{LabError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => ops::relu(x),
            Activation::Gelu => ops::gelu(x),
            Activation::Sigmoid => ops::sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and the already computed output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => ops::gelu_grad(x),
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Unary(Var, Activation),
    Softmax {
        input: Var,
        keep: Option<Vec<bool>>,
    },
    SigmoidNorm(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    RepeatRows(Var),
    SliceCols(Var, usize),
    Pool {
        input: Var,
        argmax: Option<Vec<usize>>,
        alpha: usize,
    },
    WeightedSum {
        experts: Vec<Var>,
        weights: Var,
    },
    SumAll(Var),
    Mse(Var, Matrix),
    CrossEntropy(Var, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    grad: Option<Matrix>,
}

/// Bookkeeping returned by [`Tape::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    /// Number of backward rules applied (one per reachable non-leaf node).
    pub rules_applied: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, `None` if backward never reached the node.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a 1×c bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(LabError::dim("add_bias", av.shape_str(), bv.shape_str()));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).map(|x| act.apply(x));
        let rg = self.rg(a);
        self.push(value, Op::Unary(a, act), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_masked(self.value(a), None);
        let rg = self.rg(a);
        self.push(value, Op::Softmax { input: a, keep: None }, rg)
    }

    /// Row softmax restricted to the top-`k` entries of each row; the rest are
    /// exact zeros. The selection is treated as constant when differentiating.
    pub fn top_k_softmax_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let av = self.value(a);
        if k == 0 || k > av.cols() {
            return Err(LabError::contract(format!(
                "top-k with k={k} outside 1..={}",
                av.cols()
            )));
        }
        let mut keep = Vec::with_capacity(av.len());
        for r in 0..av.rows() {
            keep.extend(ops::top_k_mask(av.row(r), k));
        }
        let value = softmax_masked(av, Some(&keep));
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Softmax {
                input: a,
                keep: Some(keep),
            },
            rg,
        ))
    }

    pub fn sigmoid_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            ops::sigmoid_normalize_into(av.row(r), value.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(value, Op::SigmoidNorm(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshaped(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(LabError::dim("concat_cols", av.shape_str(), bv.shape_str()));
        }
        let mut value = Matrix::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let row = value.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Repeats a 1×c row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(LabError::dim("repeat_rows", av.shape_str(), "1xC"));
        }
        let mut value = Matrix::zeros(n, av.cols());
        for r in 0..n {
            value.row_mut(r).copy_from_slice(av.data());
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::RepeatRows(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(LabError::dim(
                "slice_cols",
                av.shape_str(),
                format!("cols {start}..{}", start + len),
            ));
        }
        let mut value = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Pools each group of `alpha` consecutive rows into one row.
    pub fn pool_rows(&mut self, a: Var, alpha: usize, kind: PoolKind) -> Result<Var> {
        let av = self.value(a);
        if alpha == 0 || !av.rows().is_multiple_of(alpha) {
            return Err(LabError::contract(format!(
                "pool: {} rows not divisible by alpha={alpha}",
                av.rows()
            )));
        }
        let (groups, d) = (av.rows() / alpha, av.cols());
        let mut value = Matrix::zeros(groups, d);
        let mut argmax = Vec::new();
        for g in 0..groups {
            for c in 0..d {
                match kind {
                    PoolKind::Max => {
                        let mut best = g * alpha;
                        for r in g * alpha + 1..(g + 1) * alpha {
                            if av.get(r, c) > av.get(best, c) {
                                best = r;
                            }
                        }
                        value.set(g, c, av.get(best, c));
                        argmax.push(best);
                    }
                    PoolKind::Avg => {
                        let s: f64 = (g * alpha..(g + 1) * alpha).map(|r| av.get(r, c)).sum();
                        value.set(g, c, s / alpha as f64);
                    }
                }
            }
        }
        let rg = self.rg(a);
        let argmax = (kind == PoolKind::Max).then_some(argmax);
        Ok(self.push(
            value,
            Op::Pool {
                input: a,
                argmax,
                alpha,
            },
            rg,
        ))
    }

    /// out[t] = Σ_k weights[t,k] · experts[k][t].
    pub fn weighted_sum(&mut self, experts: &[Var], weights: Var) -> Result<Var> {
        let value = {
            let wv = self.value(weights);
            let evs: Vec<&Matrix> = experts.iter().map(|&e| self.value(e)).collect();
            combine(&evs, wv)?
        };
        let rg = self.rg(weights) || experts.iter().any(|&e| self.rg(e));
        Ok(self.push(
            value,
            Op::WeightedSum {
                experts: experts.to_vec(),
                weights,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn loss(&mut self, pred: Var, target: &Matrix, kind: LossKind) -> Result<Var> {
        match kind {
            LossKind::Mse => self.mse(pred, target),
            LossKind::CrossEntropy => self.cross_entropy(pred, target),
        }
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: &Matrix) -> Result<Var> {
        let pv = self.value(pred);
        pv.ensure_same_shape(target, "mse")?;
        let n = pv.len().max(1) as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(Matrix::scalar(s / n), Op::Mse(pred, target.clone()), rg))
    }

    /// Mean over rows of −log softmax(logits)[label]; `target` rows must be one-hot.
    pub fn cross_entropy(&mut self, logits: Var, target: &Matrix) -> Result<Var> {
        let lv = self.value(logits);
        lv.ensure_same_shape(target, "cross_entropy")?;
        let mut total = 0.0;
        for r in 0..lv.rows() {
            let label = one_hot_index(target.row(r))
                .ok_or_else(|| LabError::contract(format!("cross-entropy target row {r} is not one-hot")))?;
            total += ops::log_sum_exp(lv.row(r)) - lv.get(r, label);
        }
        let value = Matrix::scalar(total / lv.rows().max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy(logits, target.clone()), rg))
    }

    /// Backpropagates from a scalar root. Gradients add onto whatever earlier
    /// calls accumulated.
    pub fn backward(&mut self, root: Var) -> Result<BackwardStats> {
        if self.value(root).shape() != (1, 1) {
            return Err(LabError::contract(format!(
                "backward root must be scalar, got {}",
                self.value(root).shape_str()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        let mut rules_applied = 0;
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                rules_applied += 1;
                self.apply_rule(i, &g, &mut grads)?;
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(BackwardStats { rules_applied })
    }

    fn apply_rule(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        let send = |v: Var, d: Matrix, grads: &mut [Option<Matrix>]| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul_t(self.value(*b))?, grads);
                }
                if self.rg(*b) {
                    send(*b, self.value(*a).t_matmul(g)?, grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.scale(-1.0), grads);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.hadamard(self.value(*b))?, grads);
                }
                if self.rg(*b) {
                    send(*b, g.hadamard(self.value(*a))?, grads);
                }
            }
            Op::AddBias(a, bias) => {
                send(*a, g.clone(), grads);
                if self.rg(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    send(*bias, db, grads);
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s), grads),
            Op::Unary(a, act) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut d = g.clone();
                for ((d, &xv), &yv) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *d *= act.derivative(xv, yv);
                }
                send(*a, d, grads);
            }
            Op::Softmax { input, keep } => {
                // dx = y ⊙ (g − Σ g·y) per row; dropped entries have y = 0.
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        let kept = keep.as_ref().is_none_or(|k| k[r * y.cols() + c]);
                        if kept {
                            d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                }
                send(*input, d, grads);
            }
            Op::SigmoidNorm(a) => {
                let x = self.value(*a);
                let w = &node.value;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let s: Vec<f64> = x.row(r).iter().map(|&v| ops::sigmoid(v)).collect();
                    let total: f64 = s.iter().sum();
                    let gw: f64 = g.row(r).iter().zip(w.row(r)).map(|(a, b)| a * b).sum();
                    for (c, &sc) in s.iter().enumerate() {
                        let ds = sc * (1.0 - sc);
                        d.set(r, c, ds * (g.get(r, c) - gw) / total);
                    }
                }
                send(*a, d, grads);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, g.reshaped(r, c)?, grads);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let bc = self.value(*b).cols();
                let mut da = Matrix::zeros(g.rows(), ac);
                let mut db = Matrix::zeros(g.rows(), bc);
                for r in 0..g.rows() {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                }
                send(*a, da, grads);
                send(*b, db, grads);
            }
            Op::RepeatRows(a) => {
                let mut d = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (x, y) in d.data_mut().iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                send(*a, d, grads);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                send(*a, d, grads);
            }
            Op::Pool { input, argmax, alpha } => {
                let (rows, cols) = self.value(*input).shape();
                let mut d = Matrix::zeros(rows, cols);
                for grp in 0..g.rows() {
                    for c in 0..cols {
                        let gv = g.get(grp, c);
                        match argmax {
                            Some(idx) => {
                                let r = idx[grp * cols + c];
                                d.set(r, c, d.get(r, c) + gv);
                            }
                            None => {
                                for r in grp * alpha..(grp + 1) * alpha {
                                    d.set(r, c, gv / *alpha as f64);
                                }
                            }
                        }
                    }
                }
                send(*input, d, grads);
            }
            Op::WeightedSum { experts, weights } => {
                let w = self.value(*weights);
                for (k, &e) in experts.iter().enumerate() {
                    if !self.rg(e) {
                        continue;
                    }
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let wk = w.get(r, k);
                        d.row_mut(r).iter_mut().for_each(|x| *x *= wk);
                    }
                    send(e, d, grads);
                }
                if self.rg(*weights) {
                    let mut dw = Matrix::zeros(w.rows(), w.cols());
                    for (k, &e) in experts.iter().enumerate() {
                        let ev = self.value(e);
                        for r in 0..w.rows() {
                            let dot: f64 = g.row(r).iter().zip(ev.row(r)).map(|(a, b)| a * b).sum();
                            dw.set(r, k, dot);
                        }
                    }
                    send(*weights, dw, grads);
                }
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, Matrix::filled(r, c, g.get(0, 0)), grads);
            }
            Op::Mse(a, target) => {
                let p = self.value(*a);
                let k = 2.0 * g.get(0, 0) / p.len().max(1) as f64;
                send(*a, p.zip_map(target, "mse", |p, t| k * (p - t))?, grads);
            }
            Op::CrossEntropy(a, target) => {
                let l = self.value(*a);
                let k = g.get(0, 0) / l.rows().max(1) as f64;
                let mut d = softmax_masked(l, None);
                for (x, t) in d.data_mut().iter_mut().zip(target.data()) {
                    *x = k * (*x - t);
                }
                send(*a, d, grads);
            }
        }
        Ok(())
    }
}

fn one_hot_index(row: &[f64]) -> Option<usize> {
    let mut idx = None;
    for (i, &x) in row.iter().enumerate() {
        if x == 1.0 {
            if idx.is_some() {
                return None;
            }
            idx = Some(i);
        } else if x != 0.0 {
            return None;
        }
    }
    idx
}

/// Row softmax with an optional flat keep-mask.
pub fn softmax_masked(m: &Matrix, keep: Option<&[bool]>) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let c = m.cols();
    for r in 0..m.rows() {
        let k = keep.map(|k| &k[r * c..(r + 1) * c]);
        ops::softmax_row_into(m.row(r), k, out.row_mut(r));
    }
    out
}

/// Σ_k weights[:,k] ⊙ experts[k], accumulated in expert order from zero.
pub fn combine(experts: &[&Matrix], weights: &Matrix) -> Result<Matrix> {
    let first = experts
        .first()
        .ok_or_else(|| LabError::contract("combine needs at least one expert"))?;
    if weights.cols() != experts.len() || weights.rows() != first.rows() {
        return Err(LabError::dim(
            "moe_combine",
            format!("{} experts of {}", experts.len(), first.shape_str()),
            weights.shape_str(),
        ));
    }
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for (k, e) in experts.iter().enumerate() {
        first.ensure_same_shape(e, "moe_combine")?;
        for r in 0..out.rows() {
            let wk = weights.get(r, k);
            for (o, x) in out.row_mut(r).iter_mut().zip(e.row(r)) {
                *o += wk * x;
            }
        }
    }
    Ok(out)
}
