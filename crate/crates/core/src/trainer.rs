//! Contrastive training with rationale disentanglement and reconstruction
//! penalties.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use autodiff::{Gradients, Tape, Tensor, Var};
use rand::seq::index;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::ablation::uniform_weights;
use crate::bench::{caption, Dataset, Split};
use crate::encoder::forward::{text_forward, vision_forward};
use crate::encoder::{norm, ModelParams};
use crate::error::{Error, Result};
use crate::explain::threshold_mask;
use crate::image::Image;
use crate::metrics::{localization, zero_shot_accuracy, Threshold};
use crate::model::Model;
use crate::rng;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

const NORM_TOL: f64 = 1e-6;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-6;

/// Text paired with each training image for the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMode {
    /// The category caption alone.
    Plain,
    /// The category caption followed by one of the scene's part phrases,
    /// drawn per sample and epoch.
    Rationale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub tau_mode: Threshold,
    pub temperature: f64,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Rationale pairs per image; all pairs when there are no more than this.
    pub pairs_per_step: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub caption_mode: CaptionMode,
    /// Layer weights for the rationale heatmaps; uniform when absent.
    pub layer_weights: Option<Vec<f64>>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lambda: 0.5,
            gamma: 0.5,
            epsilon: 0.5,
            delta: 0.5,
            tau_mode: Threshold::Dynamic,
            temperature: 0.07,
            learning_rate: 3e-4,
            warmup_fraction: 0.1,
            epochs: 8,
            batch_size: 32,
            pairs_per_step: 6,
            seed: 0,
            weight_decay: 0.1,
            grad_clip: 1.0,
            caption_mode: CaptionMode::Rationale,
            layer_weights: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [("lambda", self.lambda), ("gamma", self.gamma), ("epsilon", self.epsilon), ("delta", self.delta)];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction must lie in [0, 1), got {}", self.warmup_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("weight_decay and grad_clip must be non-negative".into()));
        }
        if let Threshold::Fixed(t) = self.tau_mode {
            if !t.is_finite() {
                return Err(Error::Config(format!("fixed tau must be finite, got {t}")));
            }
        }
        if let Some(w) = &self.layer_weights {
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("layer weights must be finite".into()));
            }
        }
        Ok(())
    }

    fn weights(&self, layers: usize) -> Result<Vec<f64>> {
        match &self.layer_weights {
            None => Ok(uniform_weights(layers)),
            Some(w) if w.len() == layers => Ok(w.clone()),
            Some(w) => Err(Error::Config(format!("{} layer weights for {layers} layers", w.len()))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub infonce: f64,
    pub disen_penalty: f64,
    pub recon_penalty: f64,
    pub total: f64,
}

/// One training example as token ids.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    /// Identifies the sample in errors and seeds its pair sampling.
    pub id: usize,
    pub image: &'a Image,
    pub caption: Vec<usize>,
    /// Category prompt, the reconstruction target.
    pub category: Vec<usize>,
    pub rationales: Vec<Vec<usize>>,
}

fn check_unit(rows: &[Vec<f64>], what: &str) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        let n = norm(r);
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Argument(format!("{what} embedding {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor> {
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::Argument("embeddings differ in dimension".into()));
    }
    Ok(Tensor::new(vec![rows.len(), w], rows.concat())?)
}

/// Symmetric InfoNCE of already normalized `[B, d]` image and text rows.
fn infonce_var(t: &mut Tape, images: Var, texts: Var, temperature: f64) -> autodiff::Result<Var> {
    let b = t.value(images).shape()[0];
    let targets: Vec<usize> = (0..b).collect();
    let s = t.matmul_t(images, texts, false, true)?;
    let s = t.scale(s, 1.0 / temperature)?;
    let st = t.permute(s, &[1, 0])?;
    let rows = t.cross_entropy(s, &targets)?;
    let cols = t.cross_entropy(st, &targets)?;
    let both = t.add(rows, cols)?;
    t.scale(both, 0.5)
}

/// Symmetric contrastive loss with matched pairs on the diagonal.
pub fn infonce(image_embs: &[Vec<f64>], text_embs: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if image_embs.is_empty() || image_embs.len() != text_embs.len() {
        return Err(Error::Argument(format!("{} image and {} text embeddings", image_embs.len(), text_embs.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {temperature}")));
    }
    check_unit(image_embs, "image")?;
    check_unit(text_embs, "text")?;
    let mut t = Tape::inference();
    let i = t.constant(matrix(image_embs)?);
    let x = t.constant(matrix(text_embs)?);
    let loss = infonce_var(&mut t, i, x, temperature)?;
    Ok(t.value(loss).item())
}

/// Mean over all unordered pairs of `max(0, ε − ‖h_r − h_r'‖)`.
pub fn disentanglement_penalty(h_list: &[Vec<f64>], epsilon: f64) -> f64 {
    if h_list.len() < 2 {
        log::warn!("disentanglement penalty needs two rationales, got {}", h_list.len());
        return 0.0;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..h_list.len() {
        for b in a + 1..h_list.len() {
            let d: f64 = h_list[a].iter().zip(&h_list[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            sum += (epsilon - d).max(0.0);
            count += 1;
        }
    }
    sum / count as f64
}

/// `max(0, ‖h_sum − category_emb‖ − δ)`.
pub fn reconstruction_penalty(h_sum: &[f64], category_emb: &[f64], delta: f64) -> Result<f64> {
    if h_sum.len() != category_emb.len() {
        return Err(Error::Argument(format!("dimension mismatch: {} vs {}", h_sum.len(), category_emb.len())));
    }
    let d: f64 = h_sum.iter().zip(category_emb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    Ok((d - delta).max(0.0))
}

/// Unordered rationale pairs used for one image at one step.
fn sample_pairs(k: usize, limit: usize, seed: u64, step: u64, id: usize) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    if limit == 0 || all.len() <= limit {
        return all;
    }
    let mut r = rng::stream(seed, "pairs", &[step, id as u64]);
    let mut picked = index::sample(&mut r, all.len(), limit).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// Scalar vars of one objective evaluation.
pub struct Objective {
    pub loss: Var,
    pub infonce: Var,
    pub disen: Option<Var>,
    pub recon: Option<Var>,
}

impl Objective {
    pub fn breakdown(&self, t: &Tape) -> LossBreakdown {
        LossBreakdown {
            infonce: t.value(self.infonce).item(),
            disen_penalty: self.disen.map_or(0.0, |v| t.value(v).item()),
            recon_penalty: self.recon.map_or(0.0, |v| t.value(v).item()),
            total: t.value(self.loss).item(),
        }
    }
}

fn check_batch(batch: &[Sample<'_>], need_rationales: bool) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if need_rationales {
        if let Some(s) = batch.iter().find(|s| s.rationales.is_empty()) {
            return Err(Error::Data(format!("sample {} has no rationales", s.id)));
        }
    }
    Ok(())
}

/// Contrastive term alone, without any rationale processing.
pub fn contrastive_objective(t: &mut Tape, vars: &[Var], params: &ModelParams, batch: &[Sample<'_>], cfg: &TrainerConfig) -> Result<Objective> {
    check_batch(batch, false)?;
    let images: Vec<&Image> = batch.iter().map(|s| s.image).collect();
    let trace = vision_forward(t, vars, params, &images, None)?;
    let loss = contrastive_term(t, vars, params, batch, trace.embed, cfg)?;
    Ok(Objective { loss, infonce: loss, disen: None, recon: None })
}

fn contrastive_term(t: &mut Tape, vars: &[Var], params: &ModelParams, batch: &[Sample<'_>], embed: Var, cfg: &TrainerConfig) -> Result<Var> {
    let captions: Vec<&[usize]> = batch.iter().map(|s| s.caption.as_slice()).collect();
    let txt = text_forward(t, vars, params, &captions)?;
    let img = t.l2_normalize(embed, 1)?;
    let txt = t.l2_normalize(txt, 1)?;
    Ok(infonce_var(t, img, txt, cfg.temperature)?)
}

/// The full objective `InfoNCE + λ·disen + γ·recon` on `t`.
///
/// Both penalties are always evaluated; each joins the loss only when its
/// multiplier is positive. `step` seeds the rationale pair sampling.
pub fn objective(
    t: &mut Tape,
    vars: &[Var],
    params: &ModelParams,
    batch: &[Sample<'_>],
    cfg: &TrainerConfig,
    step: u64,
) -> Result<Objective> {
    check_batch(batch, true)?;
    let c = params.config();
    let (n, j) = (c.patches, c.joint_dim);
    let weights = cfg.weights(c.layers)?;
    let images: Vec<&Image> = batch.iter().map(|s| s.image).collect();
    let trace = vision_forward(t, vars, params, &images, Some(&weights))?;
    let infonce = contrastive_term(t, vars, params, batch, trace.embed, cfg)?;

    // Category prompts and rationale phrases share one text pass.
    let mut table: BTreeMap<&[usize], usize> = BTreeMap::new();
    for s in batch {
        table.entry(s.category.as_slice()).or_insert(0);
        for r in &s.rationales {
            table.entry(r.as_slice()).or_insert(0);
        }
    }
    let seqs: Vec<&[usize]> = table.keys().copied().collect();
    for (i, v) in table.values_mut().enumerate() {
        *v = i;
    }
    let txt = text_forward(t, vars, params, &seqs)?;
    let txt = t.l2_normalize(txt, 1)?;
    let txt_val = t.value(txt).clone();

    let contrib = trace.contributions.expect("weights were supplied");
    let contrib = t.reshape(contrib, &[batch.len() * n, j])?;
    let e = t.value(contrib).clone();
    let total_r: usize = batch.iter().map(|s| s.rationales.len()).sum();
    let mut select = vec![0.0; total_r * batch.len() * n];
    let mut row = 0;
    for (b, s) in batch.iter().enumerate() {
        for r in &s.rationales {
            let f = txt_val.row(table[r.as_slice()]);
            let g: Vec<f64> = (0..n).map(|i| e.row(b * n + i).iter().zip(f).map(|(x, y)| x * y).sum()).collect();
            let (mask, _) = threshold_mask(&g, cfg.tau_mode.tau(&g));
            for (i, _) in mask.cells.iter().enumerate().filter(|(_, &m)| m) {
                select[row * batch.len() * n + b * n + i] = 1.0;
            }
            row += 1;
        }
    }
    let select = t.constant(Tensor::new(vec![total_r, batch.len() * n], select)?);
    let h = t.matmul(select, contrib)?;

    // Disentanglement: per-pair hinges, averaged per image then over images.
    let mut diff_rows = Vec::new();
    let mut pair_w = Vec::new();
    let mut offset = 0;
    let valid = batch.iter().filter(|s| s.rationales.len() >= 2).count();
    for s in batch {
        let k = s.rationales.len();
        if k < 2 {
            log::warn!("sample {} has {k} rationale; no disentanglement pairs", s.id);
        } else {
            let pairs = sample_pairs(k, cfg.pairs_per_step, cfg.seed, step, s.id);
            for &(a, b) in &pairs {
                let mut d = vec![0.0; total_r];
                d[offset + a] = 1.0;
                d[offset + b] = -1.0;
                diff_rows.push(d);
                pair_w.push(1.0 / (pairs.len() * valid) as f64);
            }
        }
        offset += k;
    }
    let disen = if diff_rows.is_empty() {
        t.constant(Tensor::scalar(0.0))
    } else {
        let p = diff_rows.len();
        let d = t.constant(Tensor::new(vec![p, total_r], diff_rows.concat())?);
        let diffs = t.matmul(d, h)?;
        let dist = t.l2_norm(diffs, 1)?;
        let neg = t.scale(dist, -1.0)?;
        let gap = t.add_scalar(neg, cfg.epsilon)?;
        let hinge = t.relu(gap)?;
        let w = t.constant(Tensor::vector(pair_w));
        t.inner(hinge, w)?
    };

    // Reconstruction: summed rationale embeddings against the category prompt.
    let mut sum = vec![0.0; batch.len() * total_r];
    let mut offset = 0;
    for (b, s) in batch.iter().enumerate() {
        for k in 0..s.rationales.len() {
            sum[b * total_r + offset + k] = 1.0;
        }
        offset += s.rationales.len();
    }
    let sum = t.constant(Tensor::new(vec![batch.len(), total_r], sum)?);
    let h_sum = t.matmul(sum, h)?;
    let cat_ids: Vec<usize> = batch.iter().map(|s| table[s.category.as_slice()]).collect();
    let target = t.embedding(txt, &cat_ids)?;
    let gap = t.sub(h_sum, target)?;
    let dist = t.l2_norm(gap, 1)?;
    let excess = t.add_scalar(dist, -cfg.delta)?;
    let hinge = t.relu(excess)?;
    let recon = t.mean(hinge, 0, false)?;

    let mut loss = infonce;
    if cfg.lambda > 0.0 {
        let term = t.scale(disen, cfg.lambda)?;
        loss = t.add(loss, term)?;
    }
    if cfg.gamma > 0.0 {
        let term = t.scale(recon, cfg.gamma)?;
        loss = t.add(loss, term)?;
    }
    Ok(Objective { loss, infonce, disen: Some(disen), recon: Some(recon) })
}

/// AdamW with decoupled weight decay and a warmup-cosine schedule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    total_steps: u64,
}

impl Optimizer {
    pub fn new(params: &ModelParams, total_steps: u64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Optimizer { m: zeros.clone(), v: zeros, step: 0, total_steps: total_steps.max(1) }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning rate for the next update.
    pub fn lr(&self, cfg: &TrainerConfig) -> f64 {
        let warm = (cfg.warmup_fraction * self.total_steps as f64).ceil() as u64;
        let s = self.step;
        if s < warm {
            return cfg.learning_rate * (s + 1) as f64 / warm as f64;
        }
        let span = (self.total_steps - warm).max(1) as f64;
        let progress = ((s - warm) as f64 / span).min(1.0);
        cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// One update from gradients of the vars returned by `register`.
    pub fn update(&mut self, params: &mut ModelParams, vars: &[Var], grads: &Gradients, cfg: &TrainerConfig) {
        let lr = self.lr(cfg);
        let gnorm = vars
            .iter()
            .filter_map(|&v| grads.get(v))
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let clip = if cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip { cfg.grad_clip / gnorm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (i, &var) in vars.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let decay = if params.decays(i) { cfg.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.get_mut(i).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k] * clip;
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let upd = (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
                p[k] -= lr * (upd + decay * p[k]);
            }
        }
    }
}

fn finite_or_err(b: &LossBreakdown) -> Result<()> {
    if [b.infonce, b.disen_penalty, b.recon_penalty, b.total].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite loss: infonce {} disen {} recon {} total {}",
            b.infonce, b.disen_penalty, b.recon_penalty, b.total
        )))
    }
}

/// Evaluate the full objective and apply one optimizer update.
pub fn train_step(batch: &[Sample<'_>], params: &mut ModelParams, opt: &mut Optimizer, cfg: &TrainerConfig) -> Result<LossBreakdown> {
    let mut t = Tape::new();
    let vars = params.register(&mut t, true);
    let obj = objective(&mut t, &vars, params, batch, cfg, opt.steps())?;
    apply(t, vars, obj, params, opt, cfg)
}

/// [`train_step`] for the contrastive term alone.
pub fn contrastive_step(batch: &[Sample<'_>], params: &mut ModelParams, opt: &mut Optimizer, cfg: &TrainerConfig) -> Result<LossBreakdown> {
    let mut t = Tape::new();
    let vars = params.register(&mut t, true);
    let obj = contrastive_objective(&mut t, &vars, params, batch, cfg)?;
    apply(t, vars, obj, params, opt, cfg)
}

fn apply(t: Tape, vars: Vec<Var>, obj: Objective, params: &mut ModelParams, opt: &mut Optimizer, cfg: &TrainerConfig) -> Result<LossBreakdown> {
    let b = obj.breakdown(&t);
    finite_or_err(&b)?;
    let grads = t.backward(obj.loss)?;
    opt.update(params, &vars, &grads, cfg);
    if !params.all_finite() {
        return Err(Error::Numeric(format!("parameters became non-finite at step {}", opt.steps())));
    }
    Ok(b)
}

/// Objective values without any update, averaged over batches by size.
pub fn evaluate_loss(batch: &[Sample<'_>], params: &ModelParams, cfg: &TrainerConfig) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for (k, chunk) in batch.chunks(cfg.batch_size).enumerate() {
        let mut t = Tape::inference();
        let vars = params.register(&mut t, false);
        let b = objective(&mut t, &vars, params, chunk, cfg, u64::MAX - k as u64)?.breakdown(&t);
        let w = chunk.len() as f64 / batch.len() as f64;
        acc.infonce += w * b.infonce;
        acc.disen_penalty += w * b.disen_penalty;
        acc.recon_penalty += w * b.recon_penalty;
        acc.total += w * b.total;
    }
    Ok(acc)
}

/// Vocabulary corpus covering every caption and part phrase of `ds`.
pub fn corpus(ds: &Dataset) -> Vec<String> {
    let mut out: Vec<String> = ds.specs.iter().map(|s| caption(&s.name)).collect();
    out.extend(ds.specs.iter().flat_map(|s| s.parts.iter().map(|p| p.phrase.clone())));
    out
}

/// Training samples for the scenes at `indices`.
///
/// `epoch` selects the caption phrase in [`CaptionMode::Rationale`]; `None`
/// gives plain captions.
pub fn samples<'a>(model: &Model, ds: &'a Dataset, indices: &[usize], mode: CaptionMode, seed: u64, epoch: Option<usize>) -> Result<Vec<Sample<'a>>> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &ds.scenes[i];
        let prompt = caption(&s.category);
        let text = match (mode, epoch) {
            (CaptionMode::Rationale, Some(e)) if !s.part_masks.is_empty() => {
                let mut r = rng::stream(seed, "caption", &[e as u64, i as u64]);
                let pm = s.part_masks.choose(&mut r).expect("nonempty");
                format!("{} {}", s.caption, pm.rationale)
            }
            _ => s.caption.clone(),
        };
        out.push(Sample {
            id: i,
            image: &s.image,
            caption: model.tokenize(&text)?,
            category: model.tokenize(&prompt)?,
            rationales: s.part_masks.iter().map(|p| model.tokenize(&p.rationale)).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub zeroshot_acc: f64,
    pub miou: f64,
    pub disentanglability: f64,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from("epoch,infonce,disen_penalty,recon_penalty,total,zeroshot_acc,miou,disentanglability\n");
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, l.infonce, l.disen_penalty, l.recon_penalty, l.total, r.zeroshot_acc, r.miou, r.disentanglability
        );
    }
    s
}

/// Held-out loss and metrics of `model` on the validation split.
pub fn evaluate_epoch(model: &Model, ds: &Dataset, cfg: &TrainerConfig, epoch: usize) -> Result<EpochLog> {
    let val = ds.indices(Split::Val);
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let batch = samples(model, ds, &val, CaptionMode::Plain, cfg.seed, None)?;
    let loss = evaluate_loss(&batch, &model.params, cfg)?;
    let classes: Vec<String> = ds.specs.iter().map(|s| caption(&s.name)).collect();
    let images: Vec<&Image> = val.iter().map(|&i| &ds.scenes[i].image).collect();
    let labels: Vec<usize> = val
        .iter()
        .map(|&i| ds.class_index(&ds.scenes[i].category).ok_or_else(|| Error::Data(format!("scene {i}: unknown category"))))
        .collect::<Result<_>>()?;
    let zeroshot_acc = zero_shot_accuracy(model, &images, &labels, &classes)?;
    let weights = cfg.weights(model.config().layers)?;
    let loc = localization(model, ds, &val, &weights, cfg.tau_mode)?;
    Ok(EpochLog { epoch, loss, zeroshot_acc, miou: loc.miou.mean, disentanglability: loc.disentanglability.mean })
}

/// Replace `dir/checkpoint` so that an interrupted write keeps the old one.
fn write_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    let tmp = dir.join(format!("{CHECKPOINT_DIR}.tmp"));
    let dst = dir.join(CHECKPOINT_DIR);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    model.save(&tmp)?;
    if dst.exists() {
        fs::remove_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
    }
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Train on the train split for `cfg.epochs` epochs.
///
/// With `out`, writes the checkpoint and `train_log.csv` after every epoch.
/// Epoch 0 of the log evaluates the initial model.
pub fn train(ds: &Dataset, model: Model, cfg: &TrainerConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut model = model;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = vec![evaluate_epoch(&model, ds, cfg, 0)?];
    let save = |model: &Model, log: &[EpochLog]| -> Result<()> {
        if let Some(dir) = out {
            write_checkpoint(model, dir)?;
            let path = dir.join(TRAIN_LOG);
            fs::write(&path, log_csv(log)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    };
    save(&model, &log)?;
    let per_epoch = train_idx.len().div_ceil(cfg.batch_size) as u64;
    let mut opt = Optimizer::new(&model.params, per_epoch * cfg.epochs as u64);
    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", &[epoch as u64]));
        let batch = samples(&model, ds, &order, cfg.caption_mode, cfg.seed, Some(epoch))?;
        let mut last = LossBreakdown::default();
        for chunk in batch.chunks(cfg.batch_size) {
            last = train_step(chunk, &mut model.params, &mut opt, cfg)?;
        }
        let row = evaluate_epoch(&model, ds, cfg, epoch)?;
        log::info!(
            "epoch {epoch}: last batch loss {:.4}, val loss {:.4}, zero-shot {:.3}, mIoU {:.3}, disen {:.3}",
            last.total,
            row.loss.total,
            row.zeroshot_acc,
            row.miou,
            row.disentanglability
        );
        log.push(row);
        save(&model, &log)?;
    }
    Ok(TrainOutcome { model, log })
}

