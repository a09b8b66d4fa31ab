//! Image and text towers with an optional exact contribution ledger.

mod checkpoint;
mod config;
pub(crate) mod forward;
mod ledger;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, MANIFEST_FILE, WEIGHTS_FILE};
pub use config::EncoderConfig;
pub use ledger::ResidualLedger;
pub use params::{BlockIdx, ModelParams, TextIdx, VisionIdx, DEFAULT_TEMPERATURE};

use autodiff::Tape;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Images per tape when encoding in bulk.
pub const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl Embedding {
    pub fn raw(vector: Vec<f64>) -> Self {
        Embedding { vector, normalized: false }
    }

    /// Unit-length copy; a zero vector stays zero.
    pub fn normalized(&self) -> Embedding {
        Embedding { vector: unit(&self.vector), normalized: true }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.vector)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

fn rows(t: &autodiff::Tensor) -> Vec<Vec<f64>> {
    let w = *t.shape().last().unwrap_or(&1);
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

pub fn encode_image(image: &Image, params: &ModelParams, record_ledger: bool) -> Result<(Embedding, Option<ResidualLedger>)> {
    let mut out = encode_images(&[image], params, record_ledger)?;
    Ok(out.pop().expect("one image in, one out"))
}

/// Batched [`encode_image`]; results match the one-at-a-time call bitwise.
pub fn encode_images(images: &[&Image], params: &ModelParams, record_ledger: bool) -> Result<Vec<(Embedding, Option<ResidualLedger>)>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let mut tape = Tape::inference();
        let vars = params.register(&mut tape, false);
        let trace = forward::vision_forward(&mut tape, &vars, params, chunk, None)?;
        for (b, e) in rows(tape.value(trace.embed)).into_iter().enumerate() {
            let ledger = record_ledger.then(|| ledger::build(&tape, &trace, params, b));
            out.push((Embedding::raw(e), ledger));
        }
    }
    Ok(out)
}

/// Image embeddings together with layer-weighted spatial token contributions
/// `e_i = Σ_l w_l Σ_m P·a_i^{l,m}` for `i` in `1..=N`.
pub fn encode_with_contributions(
    images: &[&Image],
    params: &ModelParams,
    weights: &[f64],
) -> Result<Vec<(Embedding, Vec<Vec<f64>>)>> {
    let n = params.config().patches;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let mut tape = Tape::inference();
        let vars = params.register(&mut tape, false);
        let trace = forward::vision_forward(&mut tape, &vars, params, chunk, Some(weights))?;
        let contrib = rows(tape.value(trace.contributions.expect("requested contributions")));
        for (b, e) in rows(tape.value(trace.embed)).into_iter().enumerate() {
            out.push((Embedding::raw(e), contrib[b * n..(b + 1) * n].to_vec()));
        }
    }
    Ok(out)
}

pub fn encode_text(token_ids: &[usize], params: &ModelParams) -> Result<Embedding> {
    Ok(encode_texts(&[token_ids], params)?.pop().expect("one sequence in, one out"))
}

pub fn encode_texts(seqs: &[&[usize]], params: &ModelParams) -> Result<Vec<Embedding>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(CHUNK) {
        let mut tape = Tape::inference();
        let vars = params.register(&mut tape, false);
        let e = forward::text_forward(&mut tape, &vars, params, chunk)?;
        out.extend(rows(tape.value(e)).into_iter().map(Embedding::raw));
    }
    Ok(out)
}

/// Check that `image` matches `config`; used by callers before batching.
pub fn check_image(image: &Image, config: &EncoderConfig) -> Result<()> {
    if image.side() != config.image_side {
        return Err(Error::Config(format!("image side {} does not match config {}", image.side(), config.image_side)));
    }
    Ok(())
}
