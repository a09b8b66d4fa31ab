use serde::{Deserialize, Serialize};

use super::forward::VisionTrace;
use super::params::ModelParams;
use autodiff::Tape;

/// Exact additive decomposition of one image embedding.
///
/// Every component is mapped through the final layernorm, folded as an affine
/// map with this image's statistics, and then through the projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualLedger {
    pub layers: usize,
    pub heads: usize,
    /// Tokens including the class token at index 0.
    pub tokens: usize,
    pub joint_dim: usize,
    /// Class token and its positional term, plus the layernorm bias.
    pub input_term: Vec<f64>,
    /// Flat `[layer][head][token][joint]`.
    msa: Vec<f64>,
    /// Class-token MLP direct effect per layer.
    pub mlp_terms: Vec<Vec<f64>>,
    /// Class-token MSA output per layer before the layernorm `[layer][width]`.
    pub msa_residual: Vec<Vec<f64>>,
    /// Class-token residual stream entering the final layernorm.
    pub x_final: Vec<f64>,
}

impl ResidualLedger {
    pub fn msa(&self, layer: usize, head: usize, token: usize) -> &[f64] {
        let o = ((layer * self.heads + head) * self.tokens + token) * self.joint_dim;
        &self.msa[o..o + self.joint_dim]
    }

    /// Sum over heads of the term for (`layer`, `token`).
    pub fn msa_token(&self, layer: usize, token: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.joint_dim];
        for m in 0..self.heads {
            for (o, v) in out.iter_mut().zip(self.msa(layer, m, token)) {
                *o += v;
            }
        }
        out
    }

    /// Sum of every component; equals the image embedding.
    pub fn total(&self) -> Vec<f64> {
        let mut out = self.input_term.clone();
        for (o, v) in out.iter_mut().zip(self.msa_sum()) {
            *o += v;
        }
        for t in &self.mlp_terms {
            for (o, v) in out.iter_mut().zip(t) {
                *o += v;
            }
        }
        out
    }

    pub fn msa_sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.joint_dim];
        for chunk in self.msa.chunks(self.joint_dim) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        out
    }
}

/// Affine fold of the final layernorm: `v ↦ Pᵀ(γ ⊙ (v − mean v) / σ)`.
pub(crate) struct Fold<'a> {
    gain: &'a [f64],
    proj: &'a [f64],
    sigma: f64,
    joint: usize,
}

impl<'a> Fold<'a> {
    pub(crate) fn new(p: &'a ModelParams, x_final: &[f64]) -> Self {
        let c = p.config();
        let d = x_final.len() as f64;
        let mean = x_final.iter().sum::<f64>() / d;
        let var = x_final.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        Fold {
            gain: p.get(p.vision.ln_post_g).data(),
            proj: p.get(p.vision.proj).data(),
            sigma: (var + c.ln_eps).sqrt(),
            joint: c.joint_dim,
        }
    }

    pub(crate) fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let mut out = vec![0.0; self.joint];
        for (k, (x, g)) in v.iter().zip(self.gain).enumerate() {
            let y = g * (x - mean) / self.sigma;
            if y != 0.0 {
                let row = &self.proj[k * self.joint..(k + 1) * self.joint];
                for (o, w) in out.iter_mut().zip(row) {
                    *o += y * w;
                }
            }
        }
        out
    }
}

/// `bias · P`.
pub(crate) fn projected_bias(p: &ModelParams) -> Vec<f64> {
    let joint = p.config().joint_dim;
    let proj = p.get(p.vision.proj).data();
    let mut out = vec![0.0; joint];
    for (k, b) in p.get(p.vision.ln_post_b).data().iter().enumerate() {
        for (o, w) in out.iter_mut().zip(&proj[k * joint..(k + 1) * joint]) {
            *o += b * w;
        }
    }
    out
}

/// Ledger for image `b` of a recorded batch.
pub(crate) fn build(tape: &Tape, trace: &VisionTrace, p: &ModelParams, b: usize) -> ResidualLedger {
    let c = p.config();
    let (l_n, m_n, t_n, d, j) = (c.layers, c.heads, c.tokens(), c.width, c.joint_dim);
    let dh = c.head_dim();
    let xf = tape.value(trace.x_final).data();
    let x_final = xf[b * t_n * d..b * t_n * d + d].to_vec();
    let fold = Fold::new(p, &x_final);

    let cls = p.get(p.vision.cls).data();
    let pos0 = &p.get(p.vision.pos).data()[..d];
    let init: Vec<f64> = cls.iter().zip(pos0).map(|(a, b)| a + b).collect();
    let mut input_term = fold.apply(&init);
    for (o, v) in input_term.iter_mut().zip(projected_bias(p)) {
        *o += v;
    }

    let mut msa = Vec::with_capacity(l_n * m_n * t_n * j);
    let mut mlp_terms = Vec::with_capacity(l_n);
    let mut msa_residual = Vec::with_capacity(l_n);
    for (l, (tr, bi)) in trace.blocks.iter().zip(&p.vision.blocks).enumerate() {
        let attn = tape.value(tr.attn).data();
        let vals = tape.value(tr.values).data();
        let wo = p.get(bi.w_o).data();
        let bo = p.get(bi.b_o).data();
        let mut resid = vec![0.0; d];
        for m in 0..m_n {
            let bm = b * m_n + m;
            for i in 0..t_n {
                let a0 = attn[bm * t_n * t_n + i];
                let v = &vals[(bm * t_n + i) * dh..(bm * t_n + i + 1) * dh];
                let mut a = vec![0.0; d];
                for (k, vk) in v.iter().enumerate() {
                    let row = &wo[(m * dh + k) * d..(m * dh + k + 1) * d];
                    for (o, w) in a.iter_mut().zip(row) {
                        *o += vk * w;
                    }
                }
                for (o, bb) in a.iter_mut().zip(bo) {
                    *o = a0 * (*o + bb / m_n as f64);
                }
                for (r, x) in resid.iter_mut().zip(&a) {
                    *r += x;
                }
                msa.extend(fold.apply(&a));
            }
        }
        let mo = tape.value(tr.mlp_out).data();
        let row = &mo[b * t_n * d..b * t_n * d + d];
        mlp_terms.push(fold.apply(row));
        msa_residual.push(resid);
        debug_assert_eq!(msa.len(), (l + 1) * m_n * t_n * j);
    }
    ResidualLedger { layers: l_n, heads: m_n, tokens: t_n, joint_dim: j, input_term, msa, mlp_terms, msa_residual, x_final }
}
