//! One function per acceptance criterion. Each returns a short detail string
//! on success and the first violation on failure.

use cmoe_lab::connector::{BaselineKind, Cmoe, CmoeConfig, Connector};
use cmoe_lab::harness::delta_metric;
use cmoe_lab::interference::*;
use cmoe_lab::lora::{AdaptedLinear, LoraMode};
use cmoe_lab::metrics::*;
use cmoe_lab::numerics::{Graph, Matrix, ParamStore, Rng};
use cmoe_lab::routers::*;

use super::{check_composite, check_lora_moe, check_op, clipped_matches, lcs_brute, op_cases};

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn gradients(seeds: u64) -> Outcome {
    let mut entries = 0;
    for seed in 0..seeds {
        for case in op_cases(seed) {
            check_op(&*case.build, &case.inputs).map_err(|e| format!("{} seed {seed}: {e}", case.name))?;
            entries += 1;
        }
        entries += check_composite(seed).map_err(|e| format!("model loss seed {seed}: {e}"))?;
        entries += check_lora_moe(seed).map_err(|e| format!("lora-moe seed {seed}: {e}"))?;
    }
    Ok(format!("{seeds} seeds, {entries} op cases and parameter entries"))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn router_invariants(per_kind: usize) -> Outcome {
    let mut rng = Rng::new(2024);
    for i in 0..per_kind {
        let t = 1 + rng.below(8);
        let n = 1 + rng.below(8);
        let scores = rng.normal_matrix(t, n, 3.0);
        let at = |kind: &str, e: cmoe_lab::LabError| format!("{kind} matrix {i}: {e}");

        constant_route(t, n)
            .and_then(|w| w.validate(None))
            .map_err(|e| at("constant", e))?;

        let types: Vec<usize> = (0..t).map(|_| rng.below(n)).collect();
        let hard = hard_route(&types, n).map_err(|e| at("hard", e))?;
        hard.validate(None).map_err(|e| at("hard", e))?;
        for (r, &ty) in types.iter().enumerate() {
            ensure(hard.weights.get(r, ty) == 1.0, || {
                format!("hard matrix {i} row {r} misses its type")
            })?;
        }

        let k = 1 + rng.below(n);
        let sparse = sparse_route(&scores, k).map_err(|e| at("sparse", e))?;
        sparse.validate(Some(k)).map_err(|e| at("sparse", e))?;
        let soft = soft_route_softmax(&scores).map_err(|e| at("soft", e))?;
        soft.validate(None).map_err(|e| at("soft", e))?;
        let full = sparse_route(&scores, n).map_err(|e| at("sparse", e))?;
        ensure(full.weights.max_abs_diff(&soft.weights) <= 1e-15, || {
            format!("sparse k=N differs from softmax on matrix {i}")
        })?;

        let sig = soft_route_sigmoid(&scores).map_err(|e| at("sigmoid", e))?;
        sig.validate(None).map_err(|e| at("sigmoid", e))?;
        for r in 0..t {
            let denom: f64 = scores.row(r).iter().map(|&s| sigmoid(s)).sum();
            for c in 0..n {
                let want = sigmoid(scores.get(r, c)) / denom;
                ensure((sig.weights.get(r, c) - want).abs() <= 1e-12, || {
                    format!("sigmoid matrix {i} ({r},{c}): {} vs {want}", sig.weights.get(r, c))
                })?;
            }
        }
    }
    Ok(format!("{per_kind} score matrices per router kind"))
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Two tasks whose per-batch gradients are `a` and `sign·a` (or `b ⟂ a`)
/// plus small independent noise.
pub fn two_task_samples(relation: f64, batches: usize, dim: usize, seed: u64) -> Vec<GradientSample> {
    let mut rng = Rng::new(seed);
    let a = unit((0..dim).map(|_| rng.normal()).collect());
    let raw: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let proj: f64 = raw.iter().zip(&a).map(|(x, y)| x * y).sum();
    let perp = unit(raw.iter().zip(&a).map(|(x, y)| x - proj * y).collect());
    let other: Vec<f64> = if relation == 0.0 {
        perp
    } else {
        a.iter().map(|x| relation * x).collect()
    };
    let mut out = Vec::new();
    for (task, dir) in [("one", &a), ("two", &other)] {
        for b in 0..batches {
            let g = dir.iter().map(|x| x + 0.02 * rng.normal()).collect();
            out.push(GradientSample::new(task, b, g).unwrap());
        }
    }
    out
}

pub fn interference_analytic(batches: usize) -> Outcome {
    let mut seen = Vec::new();
    for (want, seed) in [(1.0, 1), (0.0, 2), (-1.0, 3)] {
        let gd = grad_direction_matrix(&two_task_samples(want, batches, 64, seed)).map_err(|e| e.to_string())?;
        let got = gd.get(0, 1);
        ensure((got - want).abs() <= 0.05, || {
            format!("GD target {want} measured {got}")
        })?;
        seen.push(format!("{got:.3}"));
    }

    let mut rng = Rng::new(9);
    let mut fixed = Vec::new();
    for b in 0..batches {
        for (task, norm) in [("one", 1.0), ("two", 2.0)] {
            let v = unit((0..16).map(|_| rng.normal()).collect());
            fixed.push(GradientSample::new(task, b, v.into_iter().map(|x| norm * x).collect()).unwrap());
        }
    }
    let gm = grad_magnitude_matrix(&fixed).map_err(|e| e.to_string())?;
    ensure((gm.get(0, 1) - 0.8).abs() <= 1e-12, || {
        format!("GM(1,2) = {}", gm.get(0, 1))
    })?;

    let scores = statistics_scores(&[vec![1.0, 1.0, 3.0], vec![2.0, -1.0, -1.0]]).map_err(|e| e.to_string())?;
    ensure(scores == vec![1.0, 0.0, 0.5], || {
        format!("statistics scores {scores:?}")
    })?;
    Ok(format!(
        "GD {} GM {:.12} scores {scores:?}",
        seen.join("/"),
        gm.get(0, 1)
    ))
}

pub fn init_identities(seeds: u64) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = Rng::new(seed);
        let mode = LoraMode::LoraMoe {
            rank: 4,
            alpha: 8.0,
            n_experts: 4,
            top_k: 2,
        };
        let layer = AdaptedLinear::new("l", 16, 12, mode).unwrap();
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng, None);
        let x = rng.normal_matrix(5, 16, 1.0);
        let mut g = Graph::new(&store);
        let xv = g.tape.constant(x.clone());
        let adapted = layer.forward(&mut g, xv).unwrap();
        let frozen = layer.base.forward(&mut g, xv).unwrap();
        let diff = g.tape.value(adapted).max_abs_diff(g.tape.value(frozen));
        ensure(diff <= 1e-12, || {
            format!("fresh LoRA-MoE differs from frozen layer by {diff} (seed {seed})")
        })?;
        worst = worst.max(diff);

        let (d_ag, d_t) = (6, 5);
        let cfg = CmoeConfig {
            n_experts: 1,
            ..CmoeConfig::default()
        };
        let cmoe = Cmoe::new(cfg, d_ag, d_t, &["a".to_string()]).unwrap();
        let mut cs = ParamStore::new();
        cmoe.init(&mut cs, &mut rng);
        let mlp = Connector::baseline(BaselineKind::Mlp, d_ag, d_t, None);
        let mut ms = ParamStore::new();
        for (name, p) in cs.iter() {
            if let Some(rest) = name.strip_prefix("connector.expert0.") {
                ms.insert(format!("connector.mlp.{rest}"), p.value.clone(), true);
            }
        }
        let f = rng.normal_matrix(4, d_ag, 1.0);
        let mut gc = Graph::new(&cs);
        let fv = gc.tape.constant(f.clone());
        let (out_c, _) = cmoe.forward(&mut gc, fv, "a").unwrap();
        let mut gm = Graph::new(&ms);
        let fv = gm.tape.constant(f);
        let out_m = mlp.baseline_forward(&mut gm, fv).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(gc.tape.value(out_c)) == bits(gm.tape.value(out_m)), || {
            format!("single-expert CMoE differs from MLP (seed {seed})")
        })?;
    }
    Ok(format!(
        "{seeds} seeds, LoRA-MoE max deviation {worst:e}, N=1 CMoE bit-identical"
    ))
}

pub fn delta_reproduction() -> Outcome {
    let d = delta_metric(&[77.90, 56.27], &[79.81, 56.48]).map_err(|e| e.to_string())?;
    let shown = format!("{d:.1}");
    ensure(shown == "-1.4", || format!("delta {d} rounds to {shown}"))?;
    Ok(format!("delta {d:.4} -> {shown}%"))
}

fn words(s: &str) -> Vec<String> {
    tokenize(s)
}

fn approx(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

/// Integer-grid boxes: intersection and union by counting unit cells.
fn iou_by_cells(p: [u32; 4], g: [u32; 4]) -> f64 {
    let inside = |b: [u32; 4], x: u32, y: u32| x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
    let (mut inter, mut union) = (0u32, 0u32);
    for x in 0..20 {
        for y in 0..20 {
            let (a, b) = (inside(p, x, y), inside(g, x, y));
            inter += (a && b) as u32;
            union += (a || b) as u32;
        }
    }
    if inter == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn random_box(rng: &mut Rng) -> [u32; 4] {
    let (a, b) = (rng.below(21) as u32, rng.below(21) as u32);
    let (c, d) = (rng.below(21) as u32, rng.below(21) as u32);
    [a.min(b), c.min(d), a.max(b), c.max(d)]
}

fn to_bbox(b: [u32; 4]) -> BBox {
    BBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64).unwrap()
}

pub fn metric_formulas(cases: usize) -> Outcome {
    // Tagged examples.
    let b = bbox_from_xywh(10.0, 20.0, 30.0, 40.0, 200.0, 400.0).map_err(|e| e.to_string())?;
    ensure(
        approx(b.xmin, 5.0) && approx(b.ymin, 5.0) && approx(b.xmax, 20.0) && approx(b.ymax, 15.0),
        || format!("xywh box {b:?}"),
    )?;
    let full = bbox_from_xywh(0.0, 0.0, 640.0, 480.0, 640.0, 480.0).unwrap();
    ensure(full == BBox::new(0.0, 0.0, 100.0, 100.0).unwrap(), || {
        format!("full box {full:?}")
    })?;
    ensure(bbox_from_xywh(10.0, 10.0, 300.0, 10.0, 200.0, 200.0).is_err(), || {
        "oversized box accepted".into()
    })?;
    let p = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let q = BBox::new(5.0, 5.0, 15.0, 15.0).unwrap();
    ensure(approx(iou(&p, &q), 25.0 / 175.0), || format!("iou {}", iou(&p, &q)))?;
    ensure(iou(&p, &p) == 1.0, || "self iou".into())?;
    let z = BBox::new(3.0, 3.0, 3.0, 3.0).unwrap();
    ensure(iou(&z, &z) == 0.0 && iou(&z, &p) == 0.0, || "zero-size iou".into())?;
    ensure(recall_at_05(&[0.6]).unwrap() == 1.0, || "r@0.5 [0.6]".into())?;
    ensure(recall_at_05(&[0.49]).unwrap() == 0.0, || "r@0.5 [0.49]".into())?;
    ensure(approx(recall_at_05(&[0.6, 0.4, 0.5]).unwrap(), 2.0 / 3.0), || {
        "r@0.5 triple".into()
    })?;
    ensure(recall_at_05(&[]).is_err(), || "r@0.5 of empty list".into())?;
    ensure(word_f1(&words("left lung"), &words("right lung")) == 0.5, || {
        "word f1 example".into()
    })?;
    ensure(word_f1(&words("a b"), &words("a b")) == 1.0, || {
        "word f1 identical".into()
    })?;
    ensure(word_f1(&words("a b"), &words("c d")) == 0.0, || {
        "word f1 disjoint".into()
    })?;
    ensure(
        approx(bleu_n(&words("the the the"), &words("the cat"), 1), 1.0 / 3.0),
        || "bleu clip".into(),
    )?;
    ensure(bleu_n(&words("a b c"), &words("a b c"), 2) == 1.0, || {
        "bleu identical".into()
    })?;
    ensure(bleu_n(&words("x y"), &words("a b"), 1) == 0.0, || {
        "bleu disjoint".into()
    })?;
    ensure(approx(rouge_l(&words("a b c"), &words("a x c")), 2.0 / 3.0), || {
        "rouge-l example".into()
    })?;
    ensure(rouge_l(&words("a b c"), &words("a b c")) == 1.0, || {
        "rouge-l identical".into()
    })?;
    ensure(rouge_n(&words("a b c"), &words("a b c"), 1) == 1.0, || {
        "rouge-n identical".into()
    })?;
    ensure(rouge_n(&words("x"), &words("a b"), 1) == 0.0, || {
        "rouge-n disjoint".into()
    })?;
    ensure(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap() == 0.75, || {
        "accuracy 3/4".into()
    })?;
    ensure(accuracy(&[1, 2], &[1, 2]).unwrap() == 1.0, || "accuracy all".into())?;
    ensure(accuracy(&[1, 2], &[2, 1]).unwrap() == 0.0, || "accuracy none".into())?;
    ensure(accuracy(&[1], &[1, 2]).is_err(), || "accuracy length mismatch".into())?;

    // Brute-force oracles on random inputs.
    let vocab = ["a", "b", "c", "d"];
    let mut rng = Rng::new(77);
    for i in 0..cases {
        let seq = |rng: &mut Rng| -> Vec<&str> { (0..1 + rng.below(8)).map(|_| vocab[rng.below(4)]).collect() };
        let (c, r) = (seq(&mut rng), seq(&mut rng));
        let l = lcs_brute(&c, &r);
        ensure(lcs(&c, &r) == l, || format!("case {i}: lcs {c:?} {r:?}"))?;
        let (rl, pl) = (l as f64 / c.len() as f64, l as f64 / r.len() as f64);
        let want = if l == 0 {
            0.0
        } else {
            let b2 = (pl / rl).powi(2);
            (1.0 + b2) * rl * pl / (rl + b2 * pl)
        };
        ensure(approx(rouge_l(&c, &r), want), || {
            format!("case {i}: rouge-l {c:?} {r:?}")
        })?;
        for n in 1..=3 {
            let (m, total) = clipped_matches(&c, &r, n);
            let bleu = if total == 0 { 0.0 } else { m as f64 / total as f64 };
            ensure(approx(bleu_n(&c, &r, n), bleu), || {
                format!("case {i}: bleu-{n} {c:?} {r:?}")
            })?;
            let (m, total) = clipped_matches(&r, &c, n);
            let rouge = if total == 0 { 0.0 } else { m as f64 / total as f64 };
            ensure(approx(rouge_n(&c, &r, n), rouge), || {
                format!("case {i}: rouge-{n} {c:?} {r:?}")
            })?;
        }
        let (m, _) = clipped_matches(&c, &r, 1);
        let f1 = if m == 0 {
            0.0
        } else {
            let (p, rc) = (m as f64 / c.len() as f64, m as f64 / r.len() as f64);
            2.0 * p * rc / (p + rc)
        };
        ensure(approx(word_f1(&c, &r), f1), || format!("case {i}: word f1 {c:?} {r:?}"))?;
        let (pb, gb) = (random_box(&mut rng), random_box(&mut rng));
        let got = iou(&to_bbox(pb), &to_bbox(gb));
        ensure(approx(got, iou_by_cells(pb, gb)), || {
            format!("case {i}: iou {pb:?} {gb:?} = {got}")
        })?;
        let labels: Vec<usize> = (0..1 + rng.below(10)).map(|_| rng.below(3)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| if rng.below(2) == 0 { l } else { rng.below(3) })
            .collect();
        let hits = (0..labels.len()).filter(|&k| labels[k] == preds[k]).count();
        ensure(
            accuracy(&preds, &labels).unwrap() == hits as f64 / labels.len() as f64,
            || format!("case {i}: accuracy"),
        )?;
    }
    Ok(format!("tagged examples plus {cases} brute-force cases"))
}
