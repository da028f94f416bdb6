#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use cmoe_lab::experiment::ExperimentConfig;
use cmoe_lab::numerics::{Graph, Matrix, ParamStore, Rng, Tape, Var};

pub mod criteria;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-5;
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_REL_TOL * analytic.abs().max(numeric.abs()) + FD_ABS_FLOOR
}

/// Builds the op on fresh leaves and contracts its output with `probe` so every
/// output entry contributes to the checked scalar.
fn scalar_of(
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    inputs: &[Matrix],
    probe: &mut Option<Matrix>,
) -> (Tape, Var, Vec<Var>) {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = build(&mut tape, &leaves);
    let shape = tape.value(out).shape();
    let p = probe.get_or_insert_with(|| {
        let mut rng = Rng::new(0xfeed);
        rng.normal_matrix(shape.0, shape.1, 1.0)
    });
    let pv = tape.constant(p.clone());
    let prod = tape.mul(out, pv).expect("probe shape");
    let s = tape.sum_all(prod);
    (tape, s, leaves)
}

/// Compares tape gradients with central differences for every input entry.
/// Returns the worst `(input, index, analytic, numeric)` on failure.
pub fn check_op(build: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Matrix]) -> Result<(), String> {
    let mut probe = None;
    let (mut tape, s, leaves) = scalar_of(build, inputs, &mut probe);
    tape.backward(s).map_err(|e| e.to_string())?;
    let analytic: Vec<Matrix> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, m)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();
    let eval = |xs: &[Matrix]| {
        let mut p = probe.clone();
        let (tape, s, _) = scalar_of(build, xs, &mut p);
        tape.value(s).get(0, 0)
    };
    for (i, m) in inputs.iter().enumerate() {
        for k in 0..m.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[i].data()[k];
            if !close(a, numeric) {
                return Err(format!("input {i} entry {k}: analytic {a} vs numeric {numeric}"));
            }
        }
    }
    Ok(())
}

/// Central-difference check of `loss(store)` against the tape gradients of
/// every trainable parameter in `names`.
pub fn check_store(
    store: &ParamStore,
    names: &[String],
    loss: &dyn Fn(&mut Graph<'_>) -> Var,
) -> Result<usize, String> {
    let mut g = Graph::new(store);
    let l = loss(&mut g);
    g.tape.backward(l).map_err(|e| e.to_string())?;
    let grads: BTreeMap<String, Matrix> = g.grads();
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = loss(&mut g);
        g.tape.value(l).get(0, 0)
    };
    let mut checked = 0;
    for n in names {
        let base = store.get(n).map_err(|e| e.to_string())?.clone();
        for k in 0..base.len() {
            let mut s = store.clone();
            let mut m = base.clone();
            m.data_mut()[k] += FD_STEP;
            s.set(n, m).unwrap();
            let up = eval(&s);
            let mut m = base.clone();
            m.data_mut()[k] -= FD_STEP;
            s.set(n, m).unwrap();
            let down = eval(&s);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grads[n].data()[k];
            if !close(a, numeric) {
                return Err(format!("{n}[{k}]: analytic {a} vs numeric {numeric}"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Replaces every parameter with fresh Gaussian values so no gradient path is
/// trivially zero (e.g. LoRA `B` at initialisation).
pub fn randomize(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = Rng::new(seed);
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let (r, c) = store.get(&n).unwrap().shape();
        store.set(&n, rng.normal_matrix(r, c, std)).unwrap();
    }
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs_brute(a: &[&str], b: &[&str]) -> usize {
    assert!(a.len() <= 16);
    let is_subseq = |sub: &[&str]| {
        let mut it = b.iter();
        sub.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&str> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

/// Clipped n-gram matches of `cand` against `reference`, by naive list scans.
pub fn clipped_matches(cand: &[&str], reference: &[&str], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let grams = |s: &[&str]| -> Vec<Vec<String>> {
        (0..=s.len().saturating_sub(n))
            .filter(|&i| i + n <= s.len())
            .map(|i| s[i..i + n].iter().map(|x| x.to_string()).collect())
            .collect()
    };
    let c = grams(cand);
    let r = grams(reference);
    let mut seen: Vec<Vec<String>> = Vec::new();
    let mut matched = 0;
    for g in &c {
        if seen.contains(g) {
            continue;
        }
        seen.push(g.clone());
        let in_c = c.iter().filter(|x| *x == g).count();
        let in_r = r.iter().filter(|x| *x == g).count();
        matched += in_c.min(in_r);
    }
    (matched, c.len())
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn config_path(name: &str) -> PathBuf {
    repo_root().join("configs").join(name)
}

pub fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).expect("shipped config parses")
}

/// The five-task desk suite used for the directional ablation.
pub fn desk5() -> ExperimentConfig {
    load_config("desk5.json")
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct OpCase {
    pub name: &'static str,
    pub build: Build,
    pub inputs: Vec<Matrix>,
}

fn one_hot_rows(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        m.set(r, rng.below(cols), 1.0);
    }
    m
}

/// Every differentiable tape op on random inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    use cmoe_lab::numerics::{Activation, PoolKind};
    let mut rng = Rng::new(seed);
    let mut n = |r: usize, c: usize| rng.normal_matrix(r, c, 1.0);
    let (a34, b34, c45, bias, row) = (n(3, 4), n(3, 4), n(4, 5), n(1, 4), n(1, 3));
    let (s35, e1, e2, e3, w3) = (n(3, 5), n(3, 2), n(3, 2), n(3, 2), n(3, 3));
    let p42 = n(4, 2);
    let mse_target = n(3, 4);
    let mut trng = Rng::new(seed ^ 0x5eed);
    let ce_target = one_hot_rows(&mut trng, 3, 4);
    let mut cases: Vec<OpCase> = Vec::new();
    let mut add = |name: &'static str, build: Build, inputs: Vec<Matrix>| cases.push(OpCase { name, build, inputs });
    add(
        "matmul",
        Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        vec![a34.clone(), c45.clone()],
    );
    add(
        "add",
        Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        vec![a34.clone(), b34.clone()],
    );
    add(
        "sub",
        Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        vec![a34.clone(), b34.clone()],
    );
    add(
        "mul",
        Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        vec![a34.clone(), b34.clone()],
    );
    add(
        "add_bias",
        Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()),
        vec![a34.clone(), bias.clone()],
    );
    add("scale", Box::new(|t, v| t.scale(v[0], -1.7)), vec![a34.clone()]);
    for (name, act) in [
        ("relu", Activation::Relu),
        ("gelu", Activation::Gelu),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
    ] {
        add(name, Box::new(move |t, v| t.activation(v[0], act)), vec![a34.clone()]);
    }
    add("softmax_rows", Box::new(|t, v| t.softmax_rows(v[0])), vec![s35.clone()]);
    add(
        "top_k_softmax_rows",
        Box::new(|t, v| t.top_k_softmax_rows(v[0], 2).unwrap()),
        vec![s35.clone()],
    );
    add(
        "sigmoid_normalize_rows",
        Box::new(|t, v| t.sigmoid_normalize_rows(v[0])),
        vec![s35.clone()],
    );
    add(
        "reshape",
        Box::new(|t, v| t.reshape(v[0], 6, 2).unwrap()),
        vec![a34.clone()],
    );
    add(
        "concat_cols",
        Box::new(|t, v| t.concat_cols(v[0], v[1]).unwrap()),
        vec![a34.clone(), s35.clone()],
    );
    add(
        "repeat_rows",
        Box::new(|t, v| t.repeat_rows(v[0], 4).unwrap()),
        vec![row.clone()],
    );
    add(
        "slice_cols",
        Box::new(|t, v| t.slice_cols(v[0], 1, 3).unwrap()),
        vec![s35.clone()],
    );
    add(
        "max_pool",
        Box::new(|t, v| t.pool_rows(v[0], 2, PoolKind::Max).unwrap()),
        vec![p42.clone()],
    );
    add(
        "avg_pool",
        Box::new(|t, v| t.pool_rows(v[0], 2, PoolKind::Avg).unwrap()),
        vec![p42.clone()],
    );
    add(
        "weighted_sum",
        Box::new(|t, v| t.weighted_sum(&[v[0], v[1], v[2]], v[3]).unwrap()),
        vec![e1, e2, e3, w3],
    );
    add("sum_all", Box::new(|t, v| t.sum_all(v[0])), vec![a34.clone()]);
    add(
        "mse",
        Box::new(move |t, v| t.mse(v[0], &mse_target).unwrap()),
        vec![a34.clone()],
    );
    add(
        "cross_entropy",
        Box::new(move |t, v| t.cross_entropy(v[0], &ce_target).unwrap()),
        vec![a34],
    );
    cases
}

/// A model small enough to finite-difference every trainable entry. The
/// router kind and resampler method rotate with `seed`.
pub fn tiny_model(seed: u64) -> (cmoe_lab::harness::TaskSuite, cmoe_lab::harness::Model) {
    use cmoe_lab::connector::{CmoeConfig, ResampleMethod, ResamplerConfig, RoutingStrategy};
    use cmoe_lab::harness::*;
    use cmoe_lab::lora::LoraMode;
    use cmoe_lab::routers::RouterKind;
    let routers = [
        RouterKind::SoftSoftmax,
        RouterKind::Sparse,
        RouterKind::SoftSigmoid,
        RouterKind::Constant,
        RouterKind::Hard,
    ];
    let methods = [
        ResampleMethod::Projection,
        ResampleMethod::MaxPool,
        ResampleMethod::AvgPool,
    ];
    let strategies = [
        RoutingStrategy::TokenAndTask,
        RoutingStrategy::Token,
        RoutingStrategy::Task,
    ];
    let mut sc = SuiteConfig::new(vec![
        TaskSpec::new("cls", TaskTag::Cls, HeadKind::Classification),
        TaskSpec::new("refer", TaskTag::Refer, HeadKind::BboxRegression).with_angle(1.0),
        TaskSpec::new("vqa", TaskTag::Vqa, HeadKind::TokenMatch).with_angle(2.0),
    ]);
    sc.n_visual_tokens = 4;
    sc.d_visual = 3;
    sc.d_latent = 2;
    let mc = ModelConfig {
        d_text: 4,
        head_hidden: 8,
        resampler: ResamplerConfig {
            alpha: 2,
            method: methods[seed as usize % 3],
        },
        connector: ConnectorConfig::Cmoe(CmoeConfig {
            n_experts: 3,
            router: routers[seed as usize % 5],
            strategy: strategies[(seed as usize / 5) % 3],
            top_k: 2,
            expert_hidden: Some(5),
            activation: Default::default(),
        }),
        lora: LoraMode::LoraMoe {
            rank: 2,
            alpha: 4.0,
            n_experts: 3,
            top_k: 2,
        },
    };
    let suite = make_task_suite(&sc, &mut Rng::new(seed)).unwrap();
    let model = Model::new(&mc, &sc).unwrap();
    (suite, model)
}

/// Finite-difference check of the full resampler → CMoE → head loss for every
/// task of the tiny model. Returns the number of entries checked.
pub fn check_composite(seed: u64) -> Result<usize, String> {
    let (suite, model) = tiny_model(seed);
    let mut store = model.init(&mut Rng::new(seed + 1));
    randomize(&mut store, seed + 2, 0.5);
    let names = store.trainable_names();
    let mut checked = 0;
    for t in 0..suite.tasks().len() {
        let batch = suite.batch(t, 3, &mut Rng::new(seed + 3));
        checked += check_store(&store, &names, &|g| model.loss(g, &batch).unwrap().0)?;
    }
    Ok(checked)
}

/// Finite-difference check of one LoRA-MoE layer's output with random weights.
pub fn check_lora_moe(seed: u64) -> Result<usize, String> {
    use cmoe_lab::lora::{AdaptedLinear, LoraMode};
    let mode = LoraMode::LoraMoe {
        rank: 2,
        alpha: 8.0,
        n_experts: 4,
        top_k: 2,
    };
    let layer = AdaptedLinear::new("l", 6, 5, mode).unwrap();
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut Rng::new(seed), None);
    randomize(&mut store, seed + 7, 0.5);
    let mut rng = Rng::new(seed + 11);
    let x = rng.normal_matrix(4, 6, 1.0);
    let probe = rng.normal_matrix(4, 5, 1.0);
    let names = layer.trainable_params();
    check_store(&store, &names, &|g| {
        let xv = g.tape.constant(x.clone());
        let h = layer.forward(g, xv).unwrap();
        let p = g.tape.constant(probe.clone());
        let m = g.tape.mul(h, p).unwrap();
        g.tape.sum_all(m)
    })
}
