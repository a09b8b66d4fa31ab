//! End-to-end acceptance checks. Every test writes one `PASS`/`FAIL` line to
//! stderr before asserting, so the verdicts survive output capture.
//!
//! The training comparisons share one set of runs: four objective variants
//! on the default benchmark (512 scenes per class, 8 epochs) for three seeds.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use autodiff::{grad_check, Op, Tape, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvl::ablation::{accumulated_ablation_curve, compute_mean_effects, deltas};
use rvl::bench::{caption, default_specs, gen_dataset, Dataset, Split};
use rvl::encoder::{encode_images, norm, EncoderConfig, ModelParams};
use rvl::explain::{dynamic_mask, Heatmap};
use rvl::metrics::{
    iou, localization, miou, pair_disentanglability, rationale_based_accuracy, zero_shot_accuracy, MaskPair, Threshold,
};
use rvl::ontology::{enumerate_rationales, parse_tree, validate, Edge, Node, ViolationCode};
use rvl::trainer::{corpus, infonce, objective, train, Sample, TrainerConfig};
use rvl::{Image, Model};

const ROBIN: &str = include_str!("../../core/assets/american_robin.json");
const AIRLINER: &str = include_str!("../../core/assets/airliner_corrected.json");

const N_PER_CLASS: usize = 512;
const EPOCHS: usize = 8;
const SEEDS: [u64; 3] = [0, 1, 2];

fn verdict(criterion: &str, ok: bool, detail: &str) {
    let line = format!("{} {criterion}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    std::io::stderr().lock().write_all(line.as_bytes()).unwrap();
    assert!(ok, "{criterion}: {detail}");
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
    Image::new(side, (0..side * side * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn c1_decomposition_completeness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for c in 0..100u64 {
        let heads = rng.random_range(1..=8);
        let patch_size = *[4usize, 8].choose(&mut rng).unwrap();
        let config = EncoderConfig {
            layers: rng.random_range(1..=8),
            heads,
            width: heads * rng.random_range(1..=4) * 2,
            image_side: 16,
            patch_size,
            patches: (16 / patch_size).pow(2),
            joint_dim: rng.random_range(4..=16),
            ..Default::default()
        };
        let mut params = ModelParams::init(&config, c).unwrap();
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let images: Vec<Image> = (0..10).map(|_| random_image(&mut rng, 16)).collect();
        let refs: Vec<&Image> = images.iter().collect();
        for (e, ledger) in encode_images(&refs, &params, true).unwrap() {
            let total = ledger.unwrap().total();
            let diff: Vec<f64> = total.iter().zip(&e.vector).map(|(a, b)| a - b).collect();
            worst = worst.max(norm(&diff) / norm(&e.vector));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "decomposition completeness",
        worst <= 1e-5 && secs < 60.0,
        &format!("worst relative residual {worst:.3e} over 1000 images, {secs:.1}s"),
    );
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn positive(t: Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| 0.2 + x.abs()).collect()).unwrap()
}

/// Largest relative error of `sum(op(inputs) * w)` over `trials` random draws.
fn op_error(op: &Op, shapes: &[&[usize]], pos: bool, seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let t = rand_tensor(&mut rng, s);
                if pos {
                    positive(t)
                } else {
                    t
                }
            })
            .collect();
        let mut dry = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|p| dry.param(p.clone())).collect();
        let out = dry.apply(op.clone(), &vars).unwrap();
        let w = rand_tensor(&mut rng, dry.value(out).shape());
        let err = grad_check(
            |t, v| {
                let y = t.apply(op.clone(), v)?;
                if t.value(y).shape().is_empty() {
                    return Ok(y);
                }
                let w = t.constant(w.clone());
                let p = t.mul(y, w)?;
                t.sum_all(p)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

const PHRASES: [&str; 5] = ["wings are red", "tail is long", "beak is short", "eyes are round", "legs are thin"];

fn micro_model() -> Model {
    let config = EncoderConfig {
        layers: 2,
        heads: 2,
        patches: 4,
        width: 8,
        patch_size: 4,
        image_side: 8,
        joint_dim: 6,
        text_len: 8,
        text_layers: 1,
        mlp_ratio: 2,
        ..Default::default()
    };
    let mut corpus = vec!["a photo of a bird".to_string(), "a photo of a plane".to_string()];
    corpus.extend(PHRASES.iter().map(|s| s.to_string()));
    Model::init(&config, &corpus, 11).unwrap()
}

fn micro_batch<'a>(model: &Model, imgs: &'a [Image]) -> Vec<Sample<'a>> {
    imgs.iter()
        .enumerate()
        .map(|(i, img)| {
            let cat = if i % 2 == 0 { "a photo of a bird" } else { "a photo of a plane" };
            Sample {
                id: i,
                image: img,
                caption: model.tokenize(&format!("{cat} {}", PHRASES[i])).unwrap(),
                category: model.tokenize(cat).unwrap(),
                rationales: (0..3).map(|r| model.tokenize(PHRASES[(i + r) % 5]).unwrap()).collect(),
            }
        })
        .collect()
}

fn objective_value(model: &Model, b: &[Sample<'_>], cfg: &TrainerConfig) -> f64 {
    let mut t = Tape::inference();
    let vars = model.params.register(&mut t, false);
    objective(&mut t, &vars, &model.params, b, cfg, 0).unwrap().breakdown(&t).total
}

/// Vector-level and per-entry relative error of the full objective gradient.
fn objective_error() -> (f64, f64) {
    let model = micro_model();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let imgs: Vec<Image> = (0..2).map(|_| random_image(&mut rng, 8)).collect();
    let b = micro_batch(&model, &imgs);
    let cfg = TrainerConfig { pairs_per_step: 0, ..Default::default() };
    let mut t = Tape::new();
    let vars = model.params.register(&mut t, true);
    let obj = objective(&mut t, &vars, &model.params, &b, &cfg, 0).unwrap();
    let parts = obj.breakdown(&t);
    assert!(parts.disen_penalty > 0.0 && parts.recon_penalty > 0.0, "{parts:?}");
    let grads = t.backward(obj.loss).unwrap();
    let step = 1e-5;
    let mut work = model.clone();
    let (mut num2, mut diff2, mut worst) = (0.0f64, 0.0f64, 0.0f64);
    for (p, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(model.params.get(p).shape()));
        for j in 0..analytic.numel() {
            let orig = model.params.get(p).data()[j];
            work.params.get_mut(p).data_mut()[j] = orig + step;
            let up = objective_value(&work, &b, &cfg);
            work.params.get_mut(p).data_mut()[j] = orig - step;
            let down = objective_value(&work, &b, &cfg);
            work.params.get_mut(p).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            num2 += numeric * numeric;
            diff2 += (a - numeric) * (a - numeric);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    (diff2.sqrt() / num2.sqrt(), worst)
}

#[test]
fn c2_gradient_correctness() {
    let start = Instant::now();
    let cases: Vec<(Op, Vec<&[usize]>, bool)> = vec![
        (Op::MatMul { trans_a: false, trans_b: false }, vec![&[3, 4], &[4, 2]], false),
        (Op::MatMul { trans_a: false, trans_b: true }, vec![&[3, 4], &[2, 4]], false),
        (Op::MatMul { trans_a: true, trans_b: false }, vec![&[4, 3], &[4, 2]], false),
        (Op::MatMul { trans_a: true, trans_b: true }, vec![&[4, 3], &[2, 4]], false),
        (Op::MatMul { trans_a: false, trans_b: true }, vec![&[2, 3, 4], &[2, 3, 4]], false),
        (Op::Add, vec![&[2, 3, 4], &[4]], false),
        (Op::Sub, vec![&[2, 1, 4], &[2, 3, 1]], false),
        (Op::Mul, vec![&[3, 4], &[3, 4]], false),
        (Op::Div, vec![&[3, 4], &[3, 1]], true),
        (Op::Scale(-2.5), vec![&[3, 5]], false),
        (Op::AddScalar(0.75), vec![&[3, 5]], false),
        (Op::Softmax { axis: 1 }, vec![&[2, 3, 4]], false),
        (Op::LayerNorm { eps: 1e-5 }, vec![&[3, 6], &[6], &[6]], false),
        (Op::Gelu, vec![&[3, 5]], false),
        (Op::Relu, vec![&[3, 5]], false),
        (Op::Exp, vec![&[3, 5]], false),
        (Op::Sqrt, vec![&[3, 5]], true),
        (Op::Mean { axis: 1, keep_dim: false }, vec![&[2, 3, 4]], false),
        (Op::Sum { axis: 2, keep_dim: true }, vec![&[2, 3, 4]], false),
        (Op::SumAll, vec![&[2, 3]], false),
        (Op::L2Normalize { axis: 2 }, vec![&[2, 3, 4]], false),
        (Op::L2Norm { axis: 0 }, vec![&[2, 3, 4]], false),
        (Op::Inner, vec![&[3, 4], &[3, 4]], false),
        (Op::Concat { axis: 1 }, vec![&[2, 1, 3], &[2, 4, 3]], false),
        (Op::Slice { axis: 1, start: 1, end: 4 }, vec![&[3, 5]], false),
        (Op::EmbeddingLookup { ids: vec![4, 0, 4, 2] }, vec![&[6, 3]], false),
        (Op::CrossEntropy { targets: vec![2, 0, 3] }, vec![&[3, 4]], false),
        (Op::Reshape { shape: vec![2, 6] }, vec![&[3, 4]], false),
        (Op::Permute { axes: vec![2, 0, 1] }, vec![&[2, 3, 4]], false),
    ];
    let mut worst_op = ("", 0.0f64);
    for (i, (op, shapes, pos)) in cases.iter().enumerate() {
        let e = op_error(op, shapes, *pos, 100 + i as u64, 20);
        if e >= worst_op.1 {
            worst_op = (op.name(), e);
        }
    }
    let (rel, entry) = objective_error();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "gradient correctness",
        worst_op.1 <= 1e-3 && rel <= 1e-3 && entry <= 1e-3 && secs < 120.0,
        &format!(
            "worst op {} {:.3e}; objective relative error {rel:.3e}, worst entry {entry:.3e}; {secs:.1}s",
            worst_op.0, worst_op.1
        ),
    );
}

#[test]
fn c3_metric_oracles() {
    let mut fails = Vec::new();
    let pred = [true, true, false, false];
    let gt = [false, true, false, true];
    if iou(&pred, &gt) != Some(1.0 / 3.0) {
        fails.push("iou 1/3");
    }
    let m = miou(&[MaskPair { part: "p", pred: &pred, gt: &gt }]).unwrap();
    if m.mean != 1.0 / 3.0 {
        fails.push("miou 1/3");
    }
    let s = 0.5f64.sqrt();
    let d = pair_disentanglability(&[s, s], &[1.0, 0.0]).unwrap();
    if (d - (1.0 - 1.0 / 2f64.sqrt())).abs() > 1e-9 {
        fails.push("disentanglability 1 - 1/sqrt 2");
    }
    if pair_disentanglability(&[1.0, 0.0], &[0.0, 3.0]) != Some(1.0) {
        fails.push("orthogonal disentanglability");
    }
    let mut h = Heatmap { values: vec![1.0, 1.0, 1.0, 5.0], image_id: "img".into(), rationale: "r".into(), tau_used: None };
    if dynamic_mask(&mut h).cells != [false, false, false, true] {
        fails.push("dynamic mask");
    }
    for b in [2usize, 3, 8] {
        let same = vec![vec![0.0, 1.0, 0.0]; b];
        if (infonce(&same, &same, 0.07).unwrap() - (b as f64).ln()).abs() > 1e-12 {
            fails.push("infonce ln B");
        }
    }
    verdict("metric oracles", fails.is_empty(), &if fails.is_empty() { "all exact".into() } else { fails.join(", ") });
}

#[test]
fn c4_ontology() {
    let mut fails: Vec<String> = Vec::new();
    for (name, text, n) in [("robin", ROBIN, 9), ("airliner", AIRLINER, 12)] {
        let t = parse_tree(text).unwrap();
        let got = if validate(&t).is_empty() { enumerate_rationales(&t).unwrap().len() } else { 0 };
        if got != n {
            fails.push(format!("{name}: {got} rationales"));
        }
    }
    let base = parse_tree(ROBIN).unwrap();
    let edge = |s: &str, t: &str| Edge { source: s.into(), target: t.into(), relation: "is".into() };
    let node = |id: &str| Node { id: id.into(), label: id.into() };
    let mut mutations = Vec::new();
    let mut t = base.clone();
    t.edges.push(edge("Breast", "Tail"));
    mutations.push(("same-depth edge", t, ViolationCode::SameDepthEdge));
    let mut t = base.clone();
    t.nodes.push(node("Feet"));
    mutations.push(("orphan node", t, ViolationCode::OrphanNode));
    let mut t = base.clone();
    t.edges.push(edge("Red", "Breast"));
    mutations.push(("cycle", t, ViolationCode::Cycle));
    let mut t = base.clone();
    t.nodes.push(node("Crimson"));
    t.edges.push(edge("Red", "Crimson"));
    mutations.push(("depth-3 node", t, ViolationCode::DepthExceeded));
    let mut t = base.clone();
    t.nodes.push(node("Tail"));
    mutations.push(("duplicate id", t, ViolationCode::DuplicateId));
    let mut t = base.clone();
    t.edges.push(edge("Round", "American Robin"));
    mutations.push(("missing root", t, ViolationCode::NoRoot));
    for (name, t, code) in &mutations {
        if !validate(t).iter().any(|v| v.code == *code) {
            fails.push(format!("{name} not reported as {code:?}"));
        }
    }
    verdict(
        "ontology",
        fails.is_empty(),
        &if fails.is_empty() { "9 and 12 rationales; 6 mutations flagged".into() } else { fails.join(", ") },
    );
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Variant {
    Full,
    NoDisen,
    NoRecon,
    Baseline,
}

impl Variant {
    const ALL: [Variant; 4] = [Variant::Full, Variant::NoDisen, Variant::NoRecon, Variant::Baseline];

    fn multipliers(self) -> (f64, f64) {
        match self {
            Variant::Full => (0.5, 0.5),
            Variant::NoDisen => (0.0, 0.5),
            Variant::NoRecon => (0.5, 0.0),
            Variant::Baseline => (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Scores {
    acc: f64,
    miou: f64,
    dis: f64,
    argmax: f64,
}

struct Runs {
    scores: BTreeMap<(u64, usize), Scores>,
    /// Full objective, first seed.
    full: Model,
    full_data: Dataset,
}

impl Runs {
    fn mean(&self, v: Variant) -> Scores {
        let idx = Variant::ALL.iter().position(|&x| x == v).unwrap();
        let n = SEEDS.len() as f64;
        let mut m = Scores::default();
        for s in SEEDS {
            let x = self.scores[&(s, idx)];
            m.acc += x.acc / n;
            m.miou += x.miou / n;
            m.dis += x.dis / n;
            m.argmax += x.argmax / n;
        }
        m
    }
}

fn prompts(ds: &Dataset) -> Vec<String> {
    ds.categories().iter().map(|c| caption(c)).collect()
}

fn split(ds: &Dataset, s: Split) -> (Vec<&Image>, Vec<usize>) {
    let idx = ds.indices(s);
    let images = idx.iter().map(|&i| &ds.scenes[i].image).collect();
    let labels = idx.iter().map(|&i| ds.class_index(&ds.scenes[i].category).unwrap()).collect();
    (images, labels)
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut scores = BTreeMap::new();
        let mut full = None;
        for seed in SEEDS {
            let ds = gen_dataset(&default_specs(), N_PER_CLASS, seed).unwrap();
            let test = ds.indices(Split::Test);
            let (images, labels) = split(&ds, Split::Test);
            for (k, v) in Variant::ALL.into_iter().enumerate() {
                let start = Instant::now();
                let (lambda, gamma) = v.multipliers();
                let cfg = TrainerConfig { lambda, gamma, epochs: EPOCHS, seed, ..Default::default() };
                let model = Model::init(&EncoderConfig::default(), &corpus(&ds), seed).unwrap();
                let model = train(&ds, model, &cfg, None).unwrap().model;
                let weights = vec![1.0 / model.config().layers as f64; model.config().layers];
                let loc = localization(&model, &ds, &test, &weights, Threshold::Dynamic).unwrap();
                let s = Scores {
                    acc: zero_shot_accuracy(&model, &images, &labels, &prompts(&ds)).unwrap(),
                    miou: loc.miou.mean,
                    dis: loc.disentanglability.mean,
                    argmax: loc.argmax_in_mask,
                };
                let line = format!(
                    "  run seed {seed} {v:?}: acc {:.4} miou {:.4} dis {:.4} argmax {:.4} ({:.0}s)\n",
                    s.acc,
                    s.miou,
                    s.dis,
                    s.argmax,
                    start.elapsed().as_secs_f64()
                );
                std::io::stderr().lock().write_all(line.as_bytes()).unwrap();
                scores.insert((seed, k), s);
                if v == Variant::Full && full.is_none() {
                    full = Some((model, ds.clone()));
                }
            }
        }
        let (full, full_data) = full.unwrap();
        Runs { scores, full, full_data }
    })
}

#[test]
fn c5_ablation_ordering() {
    let r = runs();
    let (f, d, n) = (r.mean(Variant::Full), r.mean(Variant::NoDisen), r.mean(Variant::NoRecon));
    let ok = f.miou > d.miou
        && d.miou > n.miou
        && f.acc > d.acc
        && d.acc > n.acc
        && f.miou - n.miou >= 0.05
        && f.acc - n.acc >= 0.05;
    verdict(
        "ablation ordering full > w/o-disen > w/o-recon",
        ok,
        &format!(
            "mIoU {:.4} / {:.4} / {:.4}, accuracy {:.4} / {:.4} / {:.4}",
            f.miou, d.miou, n.miou, f.acc, d.acc, n.acc
        ),
    );
}

#[test]
fn c6_disentanglability_gain() {
    let r = runs();
    let (f, b) = (r.mean(Variant::Full), r.mean(Variant::Baseline));
    verdict(
        "disentanglability gain over contrastive baseline >= 0.10",
        f.dis - b.dis >= 0.10,
        &format!("full {:.4}, baseline {:.4}, gain {:+.4}", f.dis, b.dis, f.dis - b.dis),
    );
}

#[test]
fn c7_ablation_curve() {
    let r = runs();
    let ds = &r.full_data;
    let (train_images, _) = split(ds, Split::Train);
    let (images, labels) = split(ds, Split::Test);
    let means = compute_mean_effects(&r.full, &train_images).unwrap();
    let curve = accumulated_ablation_curve(&r.full, &images, &labels, &prompts(ds), &means).unwrap();
    let base = zero_shot_accuracy(&r.full, &images, &labels, &prompts(ds)).unwrap();
    let d = deltas(&curve);
    let (first, last) = (d[0], d[d.len() - 1]);
    verdict(
        "ablation curve starts at baseline accuracy and final-layer delta >= first",
        curve[0].to_bits() == base.to_bits() && last >= first,
        &format!("curve {curve:.4?}, baseline {base:.4}, delta_1 {first:.4}, delta_L {last:.4}"),
    );
}

#[test]
fn c8_argmax_in_mask_gain() {
    let r = runs();
    let (f, b) = (r.mean(Variant::Full), r.mean(Variant::Baseline));
    verdict(
        "argmax-in-mask gain over contrastive baseline >= 0.15",
        f.argmax - b.argmax >= 0.15,
        &format!("full {:.4}, baseline {:.4}, gain {:+.4}", f.argmax, b.argmax, f.argmax - b.argmax),
    );
}

#[test]
fn true_rationales_beat_random_words() {
    let r = runs();
    let ds = &r.full_data;
    let (images, labels) = split(ds, Split::Test);
    let truth = ds.rationales();
    let tok = &r.full.tokenizer;
    let vocab: Vec<&str> = (0..tok.vocab_size()).filter_map(|i| tok.word(i)).filter(|w| !w.starts_with('<')).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let random: Vec<Vec<String>> = truth
        .iter()
        .map(|set| {
            set.iter().map(|_| (0..3).map(|_| *vocab.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" ")).collect()
        })
        .collect();
    let classes = truth.len();
    let t = rationale_based_accuracy(&r.full, &images, &labels, &truth, classes).unwrap();
    let n = rationale_based_accuracy(&r.full, &images, &labels, &random, classes).unwrap();
    verdict(
        "true rationales beat random word strings",
        t > n,
        &format!("true {t:.4}, random {n:.4}"),
    );
}

fn rvl_cmd(dir: &Path, args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_rvl")).current_dir(dir).env("RUST_LOG", "warn").args(args).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn pipeline(dir: &Path) {
    let steps: [&[&str]; 9] = [
        &["gen-data", "--n-per-class", "16", "--seed", "7", "--out", "data"],
        &["train", "--data", "data", "--epochs", "2", "--batch-size", "16", "--seed", "7", "--out", "run"],
        &["profile", "--data", "data", "--checkpoint", "run/checkpoint", "--fallback-uniform", "--out", "prof"],
        &["eval-seg", "--data", "data", "--checkpoint", "run/checkpoint", "--profile", "prof", "--out", "seg"],
        &["eval-disen", "--data", "data", "--checkpoint", "run/checkpoint", "--out", "disen"],
        &["eval-zeroshot", "--data", "data", "--checkpoint", "run/checkpoint", "--out", "zs"],
        &["eval-probe", "--data", "data", "--checkpoint", "run/checkpoint", "--out", "probe"],
        &["eval-retrieval", "--data", "data", "--checkpoint", "run/checkpoint", "--out", "ret"],
        &["explain", "--checkpoint", "run/checkpoint", "--image", "data/images/000000.ppm", "--rationale", "Breast is Red", "--out", "ex"],
    ];
    for args in steps {
        rvl_cmd(dir, args);
    }
}

#[test]
fn c9_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| fs::read(a.path().join(f)).unwrap() != fs::read(b.path().join(f)).ok().unwrap_or_default())
        .map(|f| f.display().to_string())
        .collect();
    verdict(
        "determinism",
        fa == fb && differing.is_empty(),
        &format!("{} files compared, {} differ {differing:?}", fa.len(), differing.len()),
    );
}
