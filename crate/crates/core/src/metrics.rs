//! Localization, disentanglement, classification, probing and retrieval
//! metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bench::{Dataset, SyntheticScene};
use crate::encoder::{dot, encode_with_contributions, norm, Embedding};
use crate::error::{Error, Result};
use crate::explain::{argmax, dynamic_threshold, heatmap, threshold_mask};
use crate::image::Image;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub breakdown: BTreeMap<String, f64>,
    pub samples: usize,
    /// FNV-1a hash of the serialized `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64, breakdown: BTreeMap<String, f64>, samples: usize, config: serde_json::Value) -> Self {
        let text = config.to_string();
        let hash = text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        MetricReport { metric: metric.into(), value, breakdown, samples, config_hash: format!("{hash:016x}"), config }
    }
}

/// `|a ∩ b| / |a ∪ b|`, or `None` when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub per_part: BTreeMap<String, f64>,
    pub mean: f64,
    pub skipped: usize,
}

/// One predicted/ground-truth pixel-mask pair for a named part.
pub struct MaskPair<'a> {
    pub part: &'a str,
    pub pred: &'a [bool],
    pub gt: &'a [bool],
}

pub fn miou(pairs: &[MaskPair<'_>]) -> Result<MiouResult> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut skipped = 0;
    for p in pairs {
        if p.pred.len() != p.gt.len() {
            return Err(Error::Argument(format!("mask sizes {} and {} differ for `{}`", p.pred.len(), p.gt.len(), p.part)));
        }
        match iou(p.pred, p.gt) {
            Some(v) => {
                let e = acc.entry(p.part.to_string()).or_default();
                e.0 += v;
                e.1 += 1;
            }
            None => skipped += 1,
        }
    }
    let per_part: BTreeMap<String, f64> = acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let mean = if per_part.is_empty() { 0.0 } else { per_part.values().sum::<f64>() / per_part.len() as f64 };
    Ok(MiouResult { per_part, mean, skipped })
}

/// `1 − |⟨m, m′⟩|` after L2 normalization; `None` for a zero vector.
pub fn pair_disentanglability(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let c = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Some(1.0 - c.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisenResult {
    pub mean: f64,
    pub images: usize,
    pub skipped_pairs: usize,
}

/// Mean over images of the mean pairwise score among that image's heatmaps.
pub fn disentanglability(per_image: &[Vec<Vec<f64>>]) -> Result<DisenResult> {
    let (mut total, mut images, mut skipped) = (0.0, 0usize, 0usize);
    for maps in per_image {
        if maps.len() < 2 {
            return Err(Error::Argument("disentanglability needs at least two heatmaps per image".into()));
        }
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..maps.len() {
            for j in i + 1..maps.len() {
                match pair_disentanglability(&maps[i], &maps[j]) {
                    Some(v) => {
                        s += v;
                        n += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
        if n > 0 {
            total += s / n as f64;
            images += 1;
        }
    }
    Ok(DisenResult { mean: if images == 0 { 0.0 } else { total / images as f64 }, images, skipped_pairs: skipped })
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    argmax(scores)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// For unit image embeddings and per-class sets of unit text embeddings,
/// predict the class whose mean similarity is largest.
pub fn predict_by_sets(images: &[Vec<f64>], sets: &[Vec<Vec<f64>>]) -> Vec<usize> {
    images
        .iter()
        .map(|x| {
            let scores: Vec<f64> =
                sets.iter().map(|set| set.iter().map(|c| dot(x, c)).sum::<f64>() / set.len() as f64).collect();
            argmax_first(&scores)
        })
        .collect()
}

pub fn zero_shot_accuracy<S: AsRef<str>>(model: &Model, images: &[&Image], labels: &[usize], class_prompts: &[S]) -> Result<f64> {
    if let Some(i) = class_prompts.iter().position(|p| p.as_ref().trim().is_empty()) {
        return Err(Error::Argument(format!("class {i} has an empty prompt")));
    }
    let prompts = model.text_embeddings(class_prompts)?;
    let sets: Vec<Vec<Vec<f64>>> = prompts.into_iter().map(|p| vec![p]).collect();
    let emb = model.image_embeddings(images)?;
    Ok(accuracy(&predict_by_sets(&emb, &sets), labels))
}

pub fn rationale_based_accuracy<S: AsRef<str>>(
    model: &Model,
    images: &[&Image],
    labels: &[usize],
    rationale_sets: &[Vec<S>],
    classes: usize,
) -> Result<f64> {
    if rationale_sets.len() != classes {
        return Err(Error::Argument(format!("{} rationale sets for {classes} classes", rationale_sets.len())));
    }
    if let Some(i) = rationale_sets.iter().position(Vec::is_empty) {
        return Err(Error::Argument(format!("class {i} has no rationales")));
    }
    let sets: Vec<Vec<Vec<f64>>> = rationale_sets.iter().map(|s| model.text_embeddings(s)).collect::<Result<_>>()?;
    let emb = model.image_embeddings(images)?;
    Ok(accuracy(&predict_by_sets(&emb, &sets), labels))
}

pub const PROBE_MAX_ITERS: usize = 5000;
pub const PROBE_GRAD_TOL: f64 = 1e-6;

/// Multinomial logistic regression with a bias, fit by full-batch gradient
/// descent from zero.
#[derive(Debug, Clone)]
pub struct Probe {
    classes: usize,
    dim: usize,
    /// `[classes][dim + 1]`, bias last.
    w: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl Probe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Argument("probe needs equally many embeddings and labels".into()));
        }
        let distinct: std::collections::BTreeSet<usize> = y.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(Error::Argument("probe training set has a single class".into()));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Argument(format!("label {bad} outside {classes} classes")));
        }
        let dim = x[0].len();
        let stride = dim + 1;
        let n = x.len() as f64;
        let max_sq = x.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0).fold(0.0, f64::max);
        let lr = 2.0 / max_sq;
        let mut w = vec![0.0; classes * stride];
        let mut grad = vec![0.0; classes * stride];
        let mut p = vec![0.0; classes];
        let mut iterations = 0;
        let mut grad_norm = f64::INFINITY;
        while iterations < PROBE_MAX_ITERS {
            grad.fill(0.0);
            for (xi, &yi) in x.iter().zip(y) {
                softmax_scores(&w, xi, classes, &mut p);
                for c in 0..classes {
                    let g = (p[c] - (c == yi) as u8 as f64) / n;
                    let row = &mut grad[c * stride..(c + 1) * stride];
                    for (r, v) in row.iter_mut().zip(xi) {
                        *r += g * v;
                    }
                    row[dim] += g;
                }
            }
            grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if grad_norm < PROBE_GRAD_TOL {
                break;
            }
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= lr * gi;
            }
            iterations += 1;
        }
        Ok(Probe { classes, dim, w, iterations, grad_norm })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let stride = self.dim + 1;
        let scores: Vec<f64> = (0..self.classes)
            .map(|c| {
                let row = &self.w[c * stride..(c + 1) * stride];
                dot(&row[..self.dim], x) + row[self.dim]
            })
            .collect();
        argmax_first(&scores)
    }
}

fn softmax_scores(w: &[f64], x: &[f64], classes: usize, out: &mut [f64]) {
    let stride = x.len() + 1;
    for c in 0..classes {
        let row = &w[c * stride..(c + 1) * stride];
        out[c] = dot(&row[..x.len()], x) + row[x.len()];
    }
    let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in out.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in out.iter_mut() {
        *v /= s;
    }
}

/// Held-out accuracy of a probe fit on the training pairs.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
) -> Result<f64> {
    let probe = Probe::fit(train_x, train_y, classes)?;
    let pred: Vec<usize> = test_x.iter().map(|x| probe.predict(x)).collect();
    Ok(accuracy(&pred, test_y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub k: usize,
    pub i2t: f64,
    pub t2i: f64,
}

/// Rank of `target` among `scores` sorted descending, ties by index.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < target)).count()
}

/// Cosine-ranked recall@K for paired image and text embeddings.
pub fn retrieval_recall(images: &[Vec<f64>], texts: &[Vec<f64>], ks: &[usize]) -> Result<Vec<Recall>> {
    let n = images.len();
    if n == 0 || n != texts.len() {
        return Err(Error::Argument(format!("{} images paired with {} texts", n, texts.len())));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Argument(format!("K={k} outside 1..={n}")));
    }
    let unit = |v: &Vec<f64>| {
        let m = norm(v);
        if m == 0.0 { v.clone() } else { v.iter().map(|x| x / m).collect::<Vec<f64>>() }
    };
    let iu: Vec<Vec<f64>> = images.iter().map(unit).collect();
    let tu: Vec<Vec<f64>> = texts.iter().map(unit).collect();
    let sim: Vec<Vec<f64>> = iu.iter().map(|a| tu.iter().map(|b| dot(a, b)).collect()).collect();
    let i2t: Vec<usize> = (0..n).map(|i| rank_of(&sim[i], i)).collect();
    let t2i: Vec<usize> = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| sim[i][j]).collect();
            rank_of(&col, j)
        })
        .collect();
    let frac = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(ks.iter().map(|&k| Recall { k, i2t: frac(&i2t, k), t2i: frac(&t2i, k) }).collect())
}

/// How heatmaps are thresholded into masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "tau")]
pub enum Threshold {
    /// `μ + σ` of each heatmap.
    Dynamic,
    Fixed(f64),
}

impl Threshold {
    pub fn tau(&self, values: &[f64]) -> f64 {
        match *self {
            Threshold::Dynamic => dynamic_threshold(values),
            Threshold::Fixed(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub miou: MiouResult,
    pub disentanglability: DisenResult,
    /// Fraction of (scene, part) pairs whose heatmap argmax falls inside the part.
    pub argmax_in_mask: f64,
    pub fallbacks: usize,
}

/// Heatmap values for every part phrase of every scene.
pub fn scene_heatmaps(model: &Model, scenes: &[&SyntheticScene], weights: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut phrases: Vec<String> = scenes.iter().flat_map(|s| s.part_masks.iter().map(|p| p.rationale.clone())).collect();
    phrases.sort();
    phrases.dedup();
    let emb = model.text_embeddings(&phrases)?;
    let lookup: BTreeMap<&str, &Vec<f64>> = phrases.iter().map(String::as_str).zip(&emb).collect();
    let images: Vec<&Image> = scenes.iter().map(|s| &s.image).collect();
    let contrib = encode_with_contributions(&images, &model.params, weights)?;
    let mut out = Vec::with_capacity(scenes.len());
    for (s, (_, spatial)) in scenes.iter().zip(&contrib) {
        let mut maps = Vec::with_capacity(s.part_masks.len());
        for pm in &s.part_masks {
            let r = Embedding { vector: lookup[pm.rationale.as_str()].clone(), normalized: true };
            maps.push(heatmap(spatial, &r)?.values);
        }
        out.push(maps);
    }
    Ok(out)
}

/// mIoU, disentanglability and argmax hit rate over the given scenes.
pub fn localization(model: &Model, ds: &Dataset, indices: &[usize], weights: &[f64], threshold: Threshold) -> Result<LocalizationReport> {
    let scenes: Vec<&SyntheticScene> = indices.iter().map(|&i| &ds.scenes[i]).collect();
    let maps = scene_heatmaps(model, &scenes, weights)?;
    let patch = model.config().patch_size;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut parts = Vec::new();
    let (mut hits, mut total, mut fallbacks) = (0usize, 0usize, 0usize);
    for (s, hm) in scenes.iter().zip(&maps) {
        let side = s.image.side();
        for (pm, values) in s.part_masks.iter().zip(hm) {
            let (mask, fb) = threshold_mask(values, threshold.tau(values));
            fallbacks += fb as usize;
            preds.push(mask.pixels(patch));
            gts.push(pm.mask.pixels(side / pm.mask.grid));
            parts.push(pm.rationale.as_str());
            let top = argmax(values);
            let g = mask.grid;
            let (r, c) = (top / g, top % g);
            // argmax cell centre, tested against the pixel mask
            let px = (r * patch + patch / 2) * side + c * patch + patch / 2;
            hits += gts.last().expect("just pushed")[px] as usize;
            total += 1;
        }
    }
    let pairs: Vec<MaskPair<'_>> =
        parts.iter().zip(preds.iter().zip(&gts)).map(|(p, (a, b))| MaskPair { part: p, pred: a, gt: b }).collect();
    Ok(LocalizationReport {
        miou: miou(&pairs)?,
        disentanglability: disentanglability(&maps)?,
        argmax_in_mask: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        fallbacks,
    })
}
