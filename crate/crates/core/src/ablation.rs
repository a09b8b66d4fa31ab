//! Accumulated mean-ablation of per-layer MSA direct effects and the layer
//! weights derived from it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{dot, encode_images, unit, ModelParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{accuracy, argmax_first};
use crate::model::Model;

pub const PROFILE_JSON: &str = "profile.json";
pub const PROFILE_BIN: &str = "profile.bin";
pub const ABLATION_CSV: &str = "ablation.csv";

/// Per-layer mean of the class-token MSA output, before the final layernorm.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanEffects {
    pub means: Vec<Vec<f64>>,
    pub count: usize,
}

pub fn compute_mean_effects(model: &Model, images: &[&Image]) -> Result<MeanEffects> {
    if images.is_empty() {
        return Err(Error::Argument("mean effects need at least one image".into()));
    }
    let c = model.config();
    let mut sums = vec![vec![0.0; c.width]; c.layers];
    for chunk in images.chunks(crate::encoder::CHUNK) {
        for (_, ledger) in encode_images(chunk, &model.params, true)? {
            for (s, r) in sums.iter_mut().zip(&ledger.expect("recorded").msa_residual) {
                for (a, b) in s.iter_mut().zip(r) {
                    *a += b;
                }
            }
        }
    }
    let n = images.len() as f64;
    let means = sums.into_iter().map(|s| s.into_iter().map(|v| v / n).collect()).collect();
    Ok(MeanEffects { means, count: images.len() })
}

/// `LN(x) · P` with the vision tower's final layernorm.
fn project(p: &ModelParams, x: &[f64]) -> Vec<f64> {
    let c = p.config();
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    let inv = 1.0 / (var + c.ln_eps).sqrt();
    let g = p.get(p.vision.ln_post_g).data();
    let b = p.get(p.vision.ln_post_b).data();
    let proj = p.get(p.vision.proj).data();
    let j = c.joint_dim;
    let mut out = vec![0.0; j];
    for k in 0..x.len() {
        let y = (x[k] - mu) * inv * g[k] + b[k];
        for (o, w) in out.iter_mut().zip(&proj[k * j..(k + 1) * j]) {
            *o += y * w;
        }
    }
    out
}

fn predict(images: &[Vec<f64>], prompts: &[Vec<f64>]) -> Vec<usize> {
    images.iter().map(|x| argmax_first(&prompts.iter().map(|p| dot(x, p)).collect::<Vec<_>>())).collect()
}

/// Zero-shot accuracy after replacing layers `1..=l` by their means, for
/// every `l` in `0..=L`. Entry 0 runs the unablated model.
pub fn accumulated_ablation_curve<S: AsRef<str>>(
    model: &Model,
    images: &[&Image],
    labels: &[usize],
    class_prompts: &[S],
    means: &MeanEffects,
) -> Result<Vec<f64>> {
    let c = model.config();
    if means.means.len() != c.layers || means.means.iter().any(|m| m.len() != c.width) {
        return Err(Error::Argument("mean effects do not match the model config".into()));
    }
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Argument("ablation needs equally many images and labels".into()));
    }
    let prompts = model.text_embeddings(class_prompts)?;
    let mut preds = vec![Vec::with_capacity(images.len()); c.layers + 1];
    for chunk in images.chunks(crate::encoder::CHUNK) {
        let base = model.image_embeddings(chunk)?;
        preds[0].extend(predict(&base, &prompts));
        for (_, ledger) in encode_images(chunk, &model.params, true)? {
            let ledger = ledger.expect("recorded");
            let mut x = ledger.x_final.clone();
            for l in 0..c.layers {
                for ((xv, r), m) in x.iter_mut().zip(&ledger.msa_residual[l]).zip(&means.means[l]) {
                    *xv -= r - m;
                }
                let e = unit(&project(&model.params, &x));
                preds[l + 1].extend(predict(&[e], &prompts));
            }
        }
    }
    Ok(preds.iter().map(|p| accuracy(p, labels)).collect())
}

/// `Δ_l = max(0, curve[l−1] − curve[l])`.
pub fn deltas(curve: &[f64]) -> Vec<f64> {
    curve.windows(2).map(|w| (w[0] - w[1]).max(0.0)).collect()
}

/// `w_l = Δ_l / Σ Δ`.
pub fn layer_weights(deltas: &[f64]) -> Result<Vec<f64>> {
    if deltas.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::Argument("deltas must be finite and nonnegative".into()));
    }
    let total: f64 = deltas.iter().sum();
    if total == 0.0 {
        return Err(Error::DegenerateProfile);
    }
    Ok(deltas.iter().map(|d| d / total).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationProfile {
    pub means: MeanEffects,
    pub accuracy_curve: Vec<f64>,
    pub deltas: Vec<f64>,
    pub weights: Vec<f64>,
    /// Which split the means were computed on.
    pub reference: String,
    pub uniform_fallback: bool,
}

pub fn uniform_weights(layers: usize) -> Vec<f64> {
    vec![1.0 / layers as f64; layers]
}

impl AblationProfile {
    pub fn from_curve(means: MeanEffects, curve: Vec<f64>, reference: &str, fallback_uniform: bool) -> Result<Self> {
        let d = deltas(&curve);
        let (weights, uniform_fallback) = match layer_weights(&d) {
            Ok(w) => (w, false),
            Err(Error::DegenerateProfile) if fallback_uniform => {
                log::warn!("all layer deltas are zero; using uniform layer weights");
                (uniform_weights(d.len()), true)
            }
            Err(e) => return Err(e),
        };
        Ok(AblationProfile { means, accuracy_curve: curve, deltas: d, weights, reference: reference.into(), uniform_fallback })
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("l,accuracy,delta,weight\n");
        for (l, acc) in self.accuracy_curve.iter().enumerate() {
            let (d, w) = if l == 0 { (String::new(), String::new()) } else { (self.deltas[l - 1].to_string(), self.weights[l - 1].to_string()) };
            writeln!(s, "{l},{acc},{d},{w}").expect("string write");
        }
        s
    }

    /// Write `profile.json`, `profile.bin` and `ablation.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = ProfileMeta {
            layers: self.means.means.len(),
            width: self.means.means.first().map_or(0, Vec::len),
            count: self.means.count,
            accuracy_curve: self.accuracy_curve.clone(),
            deltas: self.deltas.clone(),
            weights: self.weights.clone(),
            reference: self.reference.clone(),
            uniform_fallback: self.uniform_fallback,
        };
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(PROFILE_JSON, serde_json::to_string_pretty(&meta)?.as_bytes())?;
        let blob: Vec<u8> = self.means.means.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
        write(PROFILE_BIN, &blob)?;
        write(ABLATION_CSV, self.csv().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let jp = dir.join(PROFILE_JSON);
        let text = fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
        let meta: ProfileMeta = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", jp.display())))?;
        let bp = dir.join(PROFILE_BIN);
        let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        if blob.len() != meta.layers * meta.width * 8 {
            return Err(Error::Format(format!("{} has {} bytes, expected {}", bp.display(), blob.len(), meta.layers * meta.width * 8)));
        }
        let vals: Vec<f64> = blob.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let total: f64 = meta.weights.iter().sum();
        if meta.weights.len() != meta.layers || (total - 1.0).abs() > 1e-9 || meta.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Format("profile weights are not a distribution over layers".into()));
        }
        Ok(AblationProfile {
            means: MeanEffects { means: vals.chunks(meta.width.max(1)).map(<[f64]>::to_vec).collect(), count: meta.count },
            accuracy_curve: meta.accuracy_curve,
            deltas: meta.deltas,
            weights: meta.weights,
            reference: meta.reference,
            uniform_fallback: meta.uniform_fallback,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileMeta {
    layers: usize,
    width: usize,
    count: usize,
    accuracy_curve: Vec<f64>,
    deltas: Vec<f64>,
    weights: Vec<f64>,
    reference: String,
    uniform_fallback: bool,
}
