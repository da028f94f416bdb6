//! Evaluation metrics and the relative-grid bounding-box codec.
//!
//! Text metrics operate on token slices; [`tokenize`] lowercases and splits
//! on whitespace.

use std::collections::HashMap;
use std::fmt;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Box corners on the 100×100 relative grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let in_grid = |v: f64| (0.0..=100.0).contains(&v);
        if !(in_grid(xmin) && in_grid(ymin) && in_grid(xmax) && in_grid(ymax)) || xmin > xmax || ymin > ymax {
            return Err(LabError::contract(format!(
                "invalid box ({xmin}, {ymin}, {xmax}, {ymax})"
            )));
        }
        Ok(BBox { xmin, ymin, xmax, ymax })
    }

    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin) * (self.ymax - self.ymin)
    }

    /// Back to pixel `[x, y, w, h]` for an image of the given size.
    pub fn to_xywh(&self, img_w: f64, img_h: f64) -> [f64; 4] {
        let sx = img_w / 100.0;
        let sy = img_h / 100.0;
        [
            self.xmin * sx,
            self.ymin * sy,
            (self.xmax - self.xmin) * sx,
            (self.ymax - self.ymin) * sy,
        ]
    }

    /// `{<xmin><ymin><xmax><ymax>}` with each coordinate rounded to the nearest integer.
    pub fn encode(&self) -> String {
        format!(
            "{{<{}><{}><{}><{}>}}",
            self.xmin.round() as i64,
            self.ymin.round() as i64,
            self.xmax.round() as i64,
            self.ymax.round() as i64
        )
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = || LabError::contract(format!("malformed box string {s:?}"));
        let inner = s
            .trim()
            .strip_prefix('{')
            .and_then(|r| r.strip_suffix('}'))
            .ok_or_else(bad)?;
        let inner = inner
            .strip_prefix('<')
            .and_then(|r| r.strip_suffix('>'))
            .ok_or_else(bad)?;
        let vals = inner
            .split("><")
            .map(|p| p.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        match vals[..] {
            [a, b, c, d] => BBox::new(a, b, c, d),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

pub fn bbox_from_xywh(x: f64, y: f64, w: f64, h: f64, img_w: f64, img_h: f64) -> Result<BBox> {
    if !(img_w > 0.0 && img_h > 0.0) {
        return Err(LabError::contract(format!(
            "image size {img_w}x{img_h} must be positive"
        )));
    }
    if w < 0.0 || h < 0.0 || x < 0.0 || y < 0.0 || x + w > img_w || y + h > img_h {
        return Err(LabError::contract(format!(
            "box [{x}, {y}, {w}, {h}] exceeds a {img_w}x{img_h} image"
        )));
    }
    let sx = 100.0 / img_w;
    let sy = 100.0 / img_h;
    BBox::new(x * sx, y * sy, ((x + w) * sx).min(100.0), ((y + h) * sy).min(100.0))
}

pub fn iou(p: &BBox, g: &BBox) -> f64 {
    let iw = (p.xmax.min(g.xmax) - p.xmin.max(g.xmin)).max(0.0);
    let ih = (p.ymax.min(g.ymax) - p.ymin.max(g.ymin)).max(0.0);
    let inter = iw * ih;
    let union = p.area() + g.area() - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn recall_at_05(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(LabError::contract("R@0.5 of an empty list"));
    }
    Ok(ious.iter().filter(|&&v| v >= 0.5).count() as f64 / ious.len() as f64)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn counts<'a, T: AsRef<str> + 'a>(items: impl Iterator<Item = &'a [T]>) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    for g in items {
        *m.entry(g.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    m
}

fn ngram_counts<T: AsRef<str>>(toks: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    if n == 0 || toks.len() < n {
        return HashMap::new();
    }
    counts(toks.windows(n))
}

fn clipped_overlap(a: &HashMap<Vec<&str>, usize>, b: &HashMap<Vec<&str>, usize>) -> usize {
    a.iter().map(|(g, &c)| c.min(b.get(g).copied().unwrap_or(0))).sum()
}

pub fn word_f1<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let m = clipped_overlap(&ngram_counts(candidate, 1), &ngram_counts(reference, 1));
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Clipped candidate n-gram precision; 0 when the candidate has no n-grams.
pub fn bleu_n<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    if n == 0 || candidate.len() < n {
        return 0.0;
    }
    let cand = ngram_counts(candidate, n);
    let total = candidate.len() + 1 - n;
    clipped_overlap(&cand, &ngram_counts(reference, n)) as f64 / total as f64
}

/// Matched reference n-grams over all reference n-grams.
pub fn rouge_n<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    if n == 0 || reference.len() < n {
        return 0.0;
    }
    let refc = ngram_counts(reference, n);
    let total = reference.len() + 1 - n;
    clipped_overlap(&refc, &ngram_counts(candidate, n)) as f64 / total as f64
}

pub fn lcs<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with `R = LCS/|candidate|`, `P = LCS/|reference|`, `β = P/R`.
pub fn rouge_l<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(candidate, reference) as f64;
    let r = l / candidate.len() as f64;
    let p = l / reference.len() as f64;
    if r == 0.0 {
        return 0.0;
    }
    let b2 = (p / r) * (p / r);
    ((1.0 + b2) * r * p / (r + b2 * p)).clamp(0.0, 1.0)
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(LabError::contract(format!(
            "accuracy over {} predictions and {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(LabError::contract("accuracy of empty lists"));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}
