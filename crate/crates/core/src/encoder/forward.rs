//! Tape-level forward passes shared by inference and training.

use autodiff::{Tape, Tensor, TensorError, Var};

use super::params::{BlockIdx, ModelParams};
use crate::error::{Error, Result};
use crate::image::Image;

const MASK_NEG: f64 = -1e9;

/// Intermediate values of one block kept for decomposition.
pub(crate) struct BlockTrace {
    /// Attention probabilities `[B*M, T, T]`.
    pub attn: Var,
    /// Per-head values `[B*M, T, dh]`.
    pub values: Var,
    /// MLP output added to the residual `[B, T, d]`.
    pub mlp_out: Var,
}

pub(crate) struct VisionTrace {
    /// Image embeddings `[B, joint]`, not normalized.
    pub embed: Var,
    /// Residual stream entering the final layernorm `[B, T, d]`.
    pub x_final: Var,
    pub blocks: Vec<BlockTrace>,
    /// Layer-weighted spatial token contributions `[B, N, joint]`.
    pub contributions: Option<Var>,
}

fn in_layer(layer: usize) -> impl Fn(TensorError) -> Error {
    move |e| match e {
        TensorError::Numeric { op, msg } => Error::Numeric(format!("layer {layer}: {op}: {msg}")),
        other => Error::Tensor(other),
    }
}

struct Dims {
    batch: usize,
    tokens: usize,
    width: usize,
    heads: usize,
}

fn block(t: &mut Tape, v: &[Var], b: &BlockIdx, x: Var, dims: &Dims, mask: Option<Var>, eps: f64) -> autodiff::Result<(Var, BlockTrace)> {
    let Dims { batch, tokens, width: d, heads: m } = *dims;
    let dh = d / m;
    let h = t.layer_norm(x, v[b.ln1_g], v[b.ln1_b], eps)?;
    let h = t.reshape(h, &[batch * tokens, d])?;
    let qkv = t.matmul(h, v[b.w_qkv])?;
    let qkv = t.add(qkv, v[b.b_qkv])?;
    let qkv = t.reshape(qkv, &[batch, tokens, 3, m, dh])?;
    let qkv = t.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [qkv; 3];
    for (i, p) in parts.iter_mut().enumerate() {
        let s = t.slice(qkv, 0, i, i + 1)?;
        *p = t.reshape(s, &[batch * m, tokens, dh])?;
    }
    let [q, k, values] = parts;
    let scores = t.matmul_t(q, k, false, true)?;
    let mut scores = t.scale(scores, 1.0 / (dh as f64).sqrt())?;
    if let Some(mask) = mask {
        let s4 = t.reshape(scores, &[batch, m, tokens, tokens])?;
        let s4 = t.add(s4, mask)?;
        scores = t.reshape(s4, &[batch * m, tokens, tokens])?;
    }
    let attn = t.softmax(scores, 2)?;
    let ctx = t.matmul(attn, values)?;
    let ctx = t.reshape(ctx, &[batch, m, tokens, dh])?;
    let ctx = t.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = t.reshape(ctx, &[batch * tokens, d])?;
    let o = t.matmul(ctx, v[b.w_o])?;
    let o = t.add(o, v[b.b_o])?;
    let o = t.reshape(o, &[batch, tokens, d])?;
    let x = t.add(x, o)?;

    let h = t.layer_norm(x, v[b.ln2_g], v[b.ln2_b], eps)?;
    let h = t.reshape(h, &[batch * tokens, d])?;
    let h = t.matmul(h, v[b.w_fc])?;
    let h = t.add(h, v[b.b_fc])?;
    let h = t.gelu(h)?;
    let h = t.matmul(h, v[b.w_proj])?;
    let h = t.add(h, v[b.b_proj])?;
    let mlp_out = t.reshape(h, &[batch, tokens, d])?;
    let x = t.add(x, mlp_out)?;
    Ok((x, BlockTrace { attn, values, mlp_out }))
}

/// Class-token MSA output of one layer split by source token, with the
/// output bias shared out in proportion to attention: `[B*T, d]` summed over
/// heads, row `b*T + i` holding source token `i`.
fn class_attribution(t: &mut Tape, v: &[Var], b: &BlockIdx, tr: &BlockTrace, dims: &Dims) -> autodiff::Result<Var> {
    let Dims { batch, tokens, width: d, heads: m } = *dims;
    let dh = d / m;
    let a = t.reshape(tr.attn, &[batch, m, tokens, tokens])?;
    let a0 = t.slice(a, 2, 0, 1)?;
    let a0 = t.reshape(a0, &[batch, m, tokens])?;
    let a0 = t.permute(a0, &[1, 0, 2])?;
    let a0 = t.reshape(a0, &[m, batch * tokens, 1])?;
    let vals = t.reshape(tr.values, &[batch, m, tokens, dh])?;
    let vals = t.permute(vals, &[1, 0, 2, 3])?;
    let vals = t.reshape(vals, &[m, batch * tokens, dh])?;
    let wo = t.reshape(v[b.w_o], &[m, dh, d])?;
    let vproj = t.matmul(vals, wo)?;
    let weighted = t.mul(vproj, a0)?;
    let summed = t.sum(weighted, 0, false)?;
    let share = t.sum(a0, 0, false)?;
    let share = t.scale(share, 1.0 / m as f64)?;
    let bias = t.mul(share, v[b.b_o])?;
    t.add(summed, bias)
}

/// ViT forward over a batch of images.
///
/// With `weights`, also builds the differentiable per-patch contributions
/// `Σ_l w_l Σ_m P·a_i` folded through the final layernorm.
pub(crate) fn vision_forward(
    t: &mut Tape,
    v: &[Var],
    p: &ModelParams,
    images: &[&Image],
    weights: Option<&[f64]>,
) -> Result<VisionTrace> {
    let c = p.config();
    let vi = &p.vision;
    if images.is_empty() {
        return Err(Error::Argument("empty image batch".into()));
    }
    for img in images {
        if img.side() != c.image_side {
            return Err(Error::Config(format!("image side {} does not match config {}", img.side(), c.image_side)));
        }
    }
    if let Some(w) = weights {
        if w.len() != c.layers {
            return Err(Error::Argument(format!("{} layer weights for {} layers", w.len(), c.layers)));
        }
    }
    let (bsz, n, d, tok) = (images.len(), c.patches, c.width, c.tokens());
    let dims = Dims { batch: bsz, tokens: tok, width: d, heads: c.heads };
    let mut pix = Vec::with_capacity(bsz * n * c.patch_dim());
    for img in images {
        pix.extend(img.patchify(c.patch_size));
    }
    let pix = t.constant(Tensor::new(vec![bsz * n, c.patch_dim()], pix)?);
    let emb = t.matmul(pix, v[vi.patch_w])?;
    let emb = t.reshape(emb, &[bsz, n, d])?;
    let zeros = t.constant(Tensor::zeros(&[bsz, 1, 1]));
    let cls = t.add(zeros, v[vi.cls])?;
    let x = t.concat(&[cls, emb], 1)?;
    let mut x = t.add(x, v[vi.pos]).map_err(in_layer(0))?;

    let mut blocks = Vec::with_capacity(c.layers);
    let mut contrib: Option<Var> = None;
    for (l, b) in vi.blocks.iter().enumerate() {
        let (nx, tr) = block(t, v, b, x, &dims, None, c.ln_eps).map_err(in_layer(l))?;
        x = nx;
        if let Some(w) = weights {
            let a = class_attribution(t, v, b, &tr, &dims)?;
            let a = t.scale(a, w[l])?;
            contrib = Some(match contrib {
                Some(acc) => t.add(acc, a)?,
                None => a,
            });
        }
        blocks.push(tr);
    }

    let xc = t.slice(x, 1, 0, 1)?;
    let xc = t.reshape(xc, &[bsz, d])?;
    let y = t.layer_norm(xc, v[vi.ln_post_g], v[vi.ln_post_b], c.ln_eps).map_err(in_layer(c.layers))?;
    let embed = t.matmul(y, v[vi.proj])?;

    let contributions = match contrib {
        None => None,
        Some(acc) => {
            let acc = t.reshape(acc, &[bsz, tok, d])?;
            let spatial = t.slice(acc, 1, 1, tok)?;
            let mu = t.mean(spatial, 2, true)?;
            let centered = t.sub(spatial, mu)?;
            let scaled = t.mul(centered, v[vi.ln_post_g])?;
            let sigma = frozen_sigma(t, xc, c.ln_eps)?;
            let sigma = t.reshape(sigma, &[bsz, 1, 1])?;
            let folded = t.div(scaled, sigma)?;
            let folded = t.reshape(folded, &[bsz * n, d])?;
            let out = t.matmul(folded, v[vi.proj])?;
            Some(t.reshape(out, &[bsz, n, c.joint_dim])?)
        }
    };
    Ok(VisionTrace { embed, x_final: x, blocks, contributions })
}

/// Per-row layernorm scale `sqrt(var + eps)` of `x` `[B, d]`, as `[B, 1]`.
fn frozen_sigma(t: &mut Tape, x: Var, eps: f64) -> autodiff::Result<Var> {
    let mu = t.mean(x, 1, true)?;
    let c = t.sub(x, mu)?;
    let sq = t.mul(c, c)?;
    let var = t.mean(sq, 1, true)?;
    let var = t.add_scalar(var, eps)?;
    t.sqrt(var)
}

/// Text tower over a batch of token sequences; returns `[B, joint]`.
pub(crate) fn text_forward(t: &mut Tape, v: &[Var], p: &ModelParams, seqs: &[&[usize]]) -> Result<Var> {
    let c = p.config();
    let ti = &p.text;
    if seqs.is_empty() {
        return Err(Error::Argument("empty text batch".into()));
    }
    for s in seqs {
        if s.is_empty() {
            return Err(Error::Argument("empty token sequence".into()));
        }
        if s.len() > c.text_len {
            return Err(Error::Argument(format!("sequence of {} tokens exceeds text_len {}", s.len(), c.text_len)));
        }
        if let Some(id) = s.iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::Argument(format!("token id {id} outside vocabulary of {}", c.vocab_size)));
        }
    }
    let bsz = seqs.len();
    let tl = seqs.iter().map(|s| s.len()).max().unwrap_or(1);
    let d = c.width;
    let mut ids = vec![crate::tokenizer::PAD_ID; bsz * tl];
    let mut mask = vec![0.0; bsz * tl];
    let mut pool = vec![0.0; bsz * bsz * tl];
    for (b, s) in seqs.iter().enumerate() {
        ids[b * tl..b * tl + s.len()].copy_from_slice(s);
        for j in s.len()..tl {
            mask[b * tl + j] = MASK_NEG;
        }
        for j in 0..s.len() {
            pool[b * bsz * tl + b * tl + j] = 1.0 / s.len() as f64;
        }
    }
    let emb = t.embedding(v[ti.tok], &ids)?;
    let emb = t.reshape(emb, &[bsz, tl, d])?;
    let pos = t.slice(v[ti.pos], 0, 0, tl)?;
    let mut x = t.add(emb, pos)?;
    let mask = if mask.iter().any(|&m| m != 0.0) { Some(t.constant(Tensor::new(vec![bsz, 1, 1, tl], mask)?)) } else { None };
    let dims = Dims { batch: bsz, tokens: tl, width: d, heads: c.heads };
    for (l, b) in ti.blocks.iter().enumerate() {
        x = block(t, v, b, x, &dims, mask, c.ln_eps).map_err(in_layer(l))?.0;
    }
    let y = t.layer_norm(x, v[ti.ln_final_g], v[ti.ln_final_b], c.ln_eps)?;
    let y = t.reshape(y, &[bsz * tl, d])?;
    let pool = t.constant(Tensor::new(vec![bsz, bsz * tl], pool)?);
    let pooled = t.matmul(pool, y)?;
    Ok(t.matmul(pooled, v[ti.proj])?)
}
