use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rvl::ablation::{accumulated_ablation_curve, compute_mean_effects, uniform_weights, AblationProfile};
use rvl::bench::{caption, default_specs, gen_dataset, load_dataset, write_dataset, Dataset, Split};
use rvl::encoder::{dot, encode_with_contributions, Embedding};
use rvl::explain::{export_heatmap, export_mask, heatmap, threshold_mask};
use rvl::metrics::{
    linear_probe, localization, rationale_based_accuracy, retrieval_recall, zero_shot_accuracy, MetricReport, Threshold,
};
use rvl::netpbm;
use rvl::ontology::{corpus_stats, normalize_text};
use rvl::trainer::{corpus, train, TrainerConfig};
use rvl::{Error, Image, Model};
use serde::Serialize;

use crate::config::{Resolved, REPORT};
use crate::{Cli, Command, EvalArgs};

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = Resolved::from_cli(cli)?;
    cfg.write()?;
    match &cli.command {
        Command::GenData(_) => gen_data(&cfg),
        Command::ValidateOntology(a) => validate_ontology(&cfg, &a.dir),
        Command::Train(a) => train_cmd(&cfg, a),
        Command::Profile(a) => profile(&cfg, a),
        Command::Explain(a) => explain(&cfg, a),
        Command::EvalSeg(a) => eval_seg(&cfg, a),
        Command::EvalDisen(a) => eval_disen(&cfg, a),
        Command::EvalZeroshot(a) => eval_zeroshot(&cfg, a),
        Command::EvalProbe(a) => eval_probe(&cfg, a),
        Command::EvalRetrieval(a) => eval_retrieval(&cfg, a),
        Command::EvalRationalePred(a) => eval_rationale_pred(&cfg, a),
        Command::Retrieve(a) => retrieve(&cfg, a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn report(cfg: &Resolved, metric: &str, value: f64, breakdown: BTreeMap<String, f64>, samples: usize) -> Result<()> {
    let r = MetricReport::new(metric, value, breakdown, samples, cfg.to_value());
    write_json(&cfg.out.join(REPORT), &r)?;
    println!("{metric}: {value:.4} over {samples} samples");
    Ok(())
}

/// Images and class labels of one split.
fn split_data(ds: &Dataset, split: Split) -> Result<(Vec<usize>, Vec<&Image>, Vec<usize>)> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("split {split:?} is empty")).into());
    }
    let images = idx.iter().map(|&i| &ds.scenes[i].image).collect();
    let labels = idx
        .iter()
        .map(|&i| ds.class_index(&ds.scenes[i].category).ok_or_else(|| Error::Data(format!("scene {i}: unknown category"))))
        .collect::<rvl::Result<_>>()?;
    Ok((idx, images, labels))
}

fn prompts(ds: &Dataset) -> Vec<String> {
    ds.specs.iter().map(|s| caption(&s.name)).collect()
}

fn layer_weights(model: &Model, profile: Option<&Path>) -> Result<Vec<f64>> {
    match profile {
        None => Ok(uniform_weights(model.config().layers)),
        Some(dir) => {
            let p = AblationProfile::load(dir)?;
            if p.weights.len() != model.config().layers {
                return Err(Error::Config(format!("profile has {} layer weights for {} layers", p.weights.len(), model.config().layers)).into());
            }
            Ok(p.weights)
        }
    }
}

fn threshold(tau: Option<f64>) -> Threshold {
    tau.map_or(Threshold::Dynamic, Threshold::Fixed)
}

fn gen_data(cfg: &Resolved) -> Result<()> {
    let ds = gen_dataset(&default_specs(), cfg.n_per_class, cfg.seed)?;
    write_dataset(&ds, &cfg.out)?;
    let count = |s| ds.indices(s).len();
    println!(
        "wrote {} scenes ({} train, {} val, {} test) to {}",
        ds.scenes.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        cfg.out.display()
    );
    Ok(())
}

fn validate_ontology(cfg: &Resolved, dir: &Path) -> Result<()> {
    let stats = corpus_stats(dir)?;
    write_json(&cfg.out.join(REPORT), &stats)?;
    println!("{} valid, {} invalid", stats.categories, stats.invalid_count);
    for f in &stats.invalid {
        println!("  {}: {}", f.file, f.reason);
    }
    if stats.invalid_count > 0 {
        return Err(Error::Validation(format!("{} invalid tree files", stats.invalid_count)).into());
    }
    Ok(())
}

fn train_cmd(cfg: &Resolved, a: &crate::TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let model = match &a.init {
        Some(dir) => Model::load(dir)?,
        None => Model::init(&cfg.encoder, &corpus(&ds), cfg.seed)?,
    };
    let mut trainer: TrainerConfig = cfg.trainer.clone();
    if let Some(p) = &a.profile {
        trainer.layer_weights = Some(layer_weights(&model, Some(p))?);
    }
    let outcome = train(&ds, model, &trainer, Some(&cfg.out))?;
    let model = outcome.model;

    let (idx, images, labels) = split_data(&ds, Split::Test)?;
    let acc = zero_shot_accuracy(&model, &images, &labels, &prompts(&ds))?;
    let weights = layer_weights(&model, a.profile.as_deref())?;
    let loc = localization(&model, &ds, &idx, &weights, trainer.tau_mode)?;
    let last = outcome.log.last().expect("epoch 0 is always logged");
    let breakdown = BTreeMap::from([
        ("zeroshot_acc".to_string(), acc),
        ("miou".to_string(), loc.miou.mean),
        ("disentanglability".to_string(), loc.disentanglability.mean),
        ("argmax_in_mask".to_string(), loc.argmax_in_mask),
        ("fallbacks".to_string(), loc.fallbacks as f64),
        ("val_infonce".to_string(), last.loss.infonce),
        ("val_disen_penalty".to_string(), last.loss.disen_penalty),
        ("val_recon_penalty".to_string(), last.loss.recon_penalty),
        ("val_total".to_string(), last.loss.total),
    ]);
    report(cfg, "test_zeroshot_acc", acc, breakdown, idx.len())
}

fn profile(cfg: &Resolved, a: &crate::ProfileArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let model = Model::load(&a.checkpoint)?;
    let (_, reference, _) = split_data(&ds, Split::Train)?;
    let (idx, images, labels) = split_data(&ds, a.split.into())?;
    let means = compute_mean_effects(&model, &reference)?;
    let curve = accumulated_ablation_curve(&model, &images, &labels, &prompts(&ds), &means)?;
    let profile = AblationProfile::from_curve(means, curve, "train", a.fallback_uniform)?;
    profile.save(&cfg.out)?;
    let mut breakdown = BTreeMap::new();
    for (l, acc) in profile.accuracy_curve.iter().enumerate() {
        breakdown.insert(format!("accuracy_{l}"), *acc);
    }
    for (l, (d, w)) in profile.deltas.iter().zip(&profile.weights).enumerate() {
        breakdown.insert(format!("delta_{}", l + 1), *d);
        breakdown.insert(format!("weight_{}", l + 1), *w);
    }
    breakdown.insert("uniform_fallback".into(), profile.uniform_fallback as u8 as f64);
    report(cfg, "ablation_baseline_acc", profile.accuracy_curve[0], breakdown, idx.len())
}

fn explain(cfg: &Resolved, a: &crate::ExplainArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let image = netpbm::read_ppm(&a.image)?;
    let weights = layer_weights(&model, a.profile.as_deref())?;
    let (_, spatial) = encode_with_contributions(&[&image], &model.params, &weights)?.remove(0);
    let text = model.text_embeddings(&[&a.rationale])?.remove(0);
    let mut h = heatmap(&spatial, &Embedding { vector: text, normalized: true })?;
    h.image_id = a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    h.rationale = a.rationale.clone();
    let tau = threshold(a.tau).tau(&h.values);
    h.tau_used = Some(tau);
    let (mask, fallback) = threshold_mask(&h.values, tau);
    let patch = model.config().patch_size;
    export_heatmap(&h, patch, &cfg.out, "heatmap")?;
    let csv = cfg.out.join("values.csv");
    fs::rename(cfg.out.join("heatmap.csv"), &csv).with_context(|| format!("writing {}", csv.display()))?;
    export_mask(&mask, patch, &cfg.out.join("mask.pbm"))?;
    println!(
        "tau {tau:.6}: {} of {} cells selected{}",
        mask.count(),
        h.values.len(),
        if fallback { " (argmax fallback)" } else { "" }
    );
    Ok(())
}

fn eval_loc(a: &EvalArgs) -> Result<(Dataset, Model, Vec<usize>, Vec<f64>)> {
    let ds = load_dataset(&a.data)?;
    let model = Model::load(&a.checkpoint)?;
    let (idx, _, _) = split_data(&ds, a.split.into())?;
    let weights = layer_weights(&model, a.profile.as_deref())?;
    Ok((ds, model, idx, weights))
}

fn eval_seg(cfg: &Resolved, a: &EvalArgs) -> Result<()> {
    let (ds, model, idx, weights) = eval_loc(a)?;
    let loc = localization(&model, &ds, &idx, &weights, threshold(a.tau))?;
    let mut breakdown: BTreeMap<String, f64> = loc.miou.per_part.iter().map(|(k, v)| (format!("part:{k}"), *v)).collect();
    breakdown.insert("argmax_in_mask".into(), loc.argmax_in_mask);
    breakdown.insert("fallbacks".into(), loc.fallbacks as f64);
    breakdown.insert("skipped".into(), loc.miou.skipped as f64);
    report(cfg, "miou", loc.miou.mean, breakdown, idx.len())
}

fn eval_disen(cfg: &Resolved, a: &EvalArgs) -> Result<()> {
    let (ds, model, idx, weights) = eval_loc(a)?;
    let loc = localization(&model, &ds, &idx, &weights, threshold(a.tau))?;
    let d = loc.disentanglability;
    let breakdown = BTreeMap::from([
        ("images".to_string(), d.images as f64),
        ("skipped_pairs".to_string(), d.skipped_pairs as f64),
    ]);
    report(cfg, "disentanglability", d.mean, breakdown, idx.len())
}

fn eval_zeroshot(cfg: &Resolved, a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let model = Model::load(&a.checkpoint)?;
    let (_, images, labels) = split_data(&ds, a.split.into())?;
    let acc = zero_shot_accuracy(&model, &images, &labels, &prompts(&ds))?;
    let mut breakdown = BTreeMap::new();
    let emb = model.image_embeddings(&images)?;
    let p = model.text_embeddings(&prompts(&ds))?;
    for (c, name) in ds.categories().iter().enumerate() {
        let mine: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if mine.is_empty() {
            continue;
        }
        let hits = mine
            .iter()
            .filter(|&&i| rvl::metrics::argmax_first(&p.iter().map(|q| dot(&emb[i], q)).collect::<Vec<_>>()) == c)
            .count();
        breakdown.insert(format!("class:{name}"), hits as f64 / mine.len() as f64);
    }
    report(cfg, "zeroshot_acc", acc, breakdown, images.len())
}

fn eval_probe(cfg: &Resolved, a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let model = Model::load(&a.checkpoint)?;
    let (_, train_images, train_labels) = split_data(&ds, Split::Train)?;
    let (_, images, labels) = split_data(&ds, a.split.into())?;
    let train_x = model.image_embeddings(&train_images)?;
    let test_x = model.image_embeddings(&images)?;
    let acc = linear_probe(&train_x, &train_labels, &test_x, &labels, ds.specs.len())?;
    let breakdown = BTreeMap::from([("train_samples".to_string(), train_x.len() as f64)]);
    report(cfg, "linear_probe_acc", acc, breakdown, images.len())
}

fn eval_retrieval(cfg: &Resolved, a: &crate::RetrievalArgs) -> Result<()> {
    let ds = load_dataset(&a.eval.data)?;
    let model = Model::load(&a.eval.checkpoint)?;
    let (idx, images, _) = split_data(&ds, a.eval.split.into())?;
    let captions: Vec<&str> = idx.iter().map(|&i| ds.scenes[i].caption.as_str()).collect();
    let img = model.image_embeddings(&images)?;
    let txt = model.text_embeddings(&captions)?;
    let recalls = retrieval_recall(&img, &txt, &a.k)?;
    let mut breakdown = BTreeMap::new();
    for r in &recalls {
        breakdown.insert(format!("i2t@{}", r.k), r.i2t);
        breakdown.insert(format!("t2i@{}", r.k), r.t2i);
    }
    let first = &recalls[0];
    report(cfg, &format!("recall@{}", first.k), (first.i2t + first.t2i) / 2.0, breakdown, idx.len())
}

fn eval_rationale_pred(cfg: &Resolved, a: &crate::RationalePredArgs) -> Result<()> {
    let ds = load_dataset(&a.eval.data)?;
    let model = Model::load(&a.eval.checkpoint)?;
    let (_, images, labels) = split_data(&ds, a.eval.split.into())?;
    let sets: Vec<Vec<String>> = match &a.rationale_file {
        None => ds.rationales(),
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut map: BTreeMap<String, Vec<String>> =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            ds.categories()
                .iter()
                .map(|c| map.remove(c).ok_or_else(|| Error::Argument(format!("{}: no rationale set for {c}", path.display()))))
                .collect::<rvl::Result<_>>()?
        }
    };
    let acc = rationale_based_accuracy(&model, &images, &labels, &sets, ds.specs.len())?;
    let breakdown = BTreeMap::from([(
        "mean_set_size".to_string(),
        sets.iter().map(Vec::len).sum::<usize>() as f64 / sets.len() as f64,
    )]);
    report(cfg, "rationale_pred_acc", acc, breakdown, images.len())
}

#[derive(Serialize)]
struct Hit {
    scene: usize,
    category: String,
    score: f64,
    has_part: bool,
}

fn retrieve(cfg: &Resolved, a: &crate::RetrieveArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let model = Model::load(&a.checkpoint)?;
    let (idx, images, _) = split_data(&ds, a.split.into())?;
    if a.k == 0 || a.k > idx.len() {
        return Err(Error::Argument(format!("k={} outside 1..={}", a.k, idx.len())).into());
    }
    let q = model.text_embeddings(&[&a.rationale])?.remove(0);
    let emb = model.image_embeddings(&images)?;
    let mut order: Vec<(usize, f64)> = emb.iter().map(|e| dot(e, &q)).enumerate().collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let wanted = normalize_text(&a.rationale);
    let hits: Vec<Hit> = order[..a.k]
        .iter()
        .map(|&(j, score)| {
            let s = &ds.scenes[idx[j]];
            let has_part = s.part_masks.iter().any(|p| normalize_text(&p.rationale) == wanted);
            Hit { scene: idx[j], category: s.category.clone(), score, has_part }
        })
        .collect();
    write_json(&cfg.out.join("retrieval.json"), &hits)?;
    for h in &hits {
        println!("{:6} {:10} {:.4}{}", h.scene, h.category, h.score, if h.has_part { " *" } else { "" });
    }
    let precision = hits.iter().filter(|h| h.has_part).count() as f64 / a.k as f64;
    report(cfg, &format!("precision@{}", a.k), precision, BTreeMap::new(), idx.len())
}
