//! Token contributions, rationale heatmaps, thresholded masks and the
//! masked rationale embedding.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{dot, Embedding, ResidualLedger};
use crate::error::{Error, Result};
use crate::netpbm;

/// `e_i = Σ_l w_l Σ_m msa[l][m][i]` for every token, class token first.
pub fn token_contributions(ledger: &ResidualLedger, weights: &[f64]) -> Result<Vec<Vec<f64>>> {
    if weights.len() != ledger.layers {
        return Err(Error::Argument(format!("{} layer weights for a {}-layer ledger", weights.len(), ledger.layers)));
    }
    let mut out = vec![vec![0.0; ledger.joint_dim]; ledger.tokens];
    for (l, &w) in weights.iter().enumerate() {
        for (i, e) in out.iter_mut().enumerate() {
            for (o, v) in e.iter_mut().zip(ledger.msa_token(l, i)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// One score per spatial token in raster order.
    pub values: Vec<f64>,
    pub image_id: String,
    pub rationale: String,
    pub tau_used: Option<f64>,
}

/// Scores `⟨e_i, f(r)⟩` over spatial contributions (class token excluded).
pub fn heatmap(spatial: &[Vec<f64>], rationale: &Embedding) -> Result<Heatmap> {
    if !rationale.normalized && (rationale.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument("rationale embedding must be L2-normalized".into()));
    }
    let mut values = Vec::with_capacity(spatial.len());
    for e in spatial {
        if e.len() != rationale.vector.len() {
            return Err(Error::Argument(format!(
                "contribution of width {} against embedding of width {}",
                e.len(),
                rationale.vector.len()
            )));
        }
        values.push(dot(e, &rationale.vector));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite heatmap value".into()));
    }
    Ok(Heatmap { values, image_id: String::new(), rationale: String::new(), tau_used: None })
}

/// `μ + σ` with the population standard deviation.
pub fn dynamic_threshold(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    mu + var.sqrt()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Square patch-grid mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub grid: usize,
    pub cells: Vec<bool>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Nearest-neighbour expansion to pixels, row-major.
    pub fn pixels(&self, patch_size: usize) -> Vec<bool> {
        let side = self.grid * patch_size;
        (0..side * side).map(|p| self.cells[(p / side / patch_size) * self.grid + (p % side) / patch_size]).collect()
    }
}

fn grid_side(n: usize) -> usize {
    let g = (n as f64).sqrt().round() as usize;
    assert_eq!(g * g, n, "heatmap of {n} values is not a square grid");
    g
}

/// Cells with value above `tau`; an empty selection falls back to the first
/// argmax cell. The flag reports whether the fallback fired.
pub fn threshold_mask(values: &[f64], tau: f64) -> (BinaryMask, bool) {
    let mut cells: Vec<bool> = values.iter().map(|&v| v > tau).collect();
    let fallback = !cells.iter().any(|&c| c);
    if fallback {
        cells[argmax(values)] = true;
        log::debug!("empty mask at tau {tau}; using argmax cell");
    }
    (BinaryMask { grid: grid_side(values.len()), cells }, fallback)
}

/// Mask at the dynamic threshold, recorded into `h.tau_used`.
pub fn dynamic_mask(h: &mut Heatmap) -> BinaryMask {
    let tau = dynamic_threshold(&h.values);
    h.tau_used = Some(tau);
    threshold_mask(&h.values, tau).0
}

/// `h = Σ_i e_i · 𝟙(g_i > τ)`, or the argmax token's `e_i` if nothing exceeds `τ`.
pub fn rationale_embedding_h(spatial: &[Vec<f64>], heatmap: &Heatmap, tau: f64) -> Embedding {
    let (mask, _) = threshold_mask(&heatmap.values, tau);
    let mut out = vec![0.0; spatial.first().map_or(0, Vec::len)];
    for (e, _) in spatial.iter().zip(&mask.cells).filter(|(_, &m)| m) {
        for (o, v) in out.iter_mut().zip(e) {
            *o += v;
        }
    }
    Embedding::raw(out)
}

/// Min-max scaled to 0..=255; a constant map becomes all zeros.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Write `<stem>.pgm` (patch grid), `<stem>_px.pgm` (pixel-expanded) and
/// `<stem>.csv` (raw values) into `dir`.
pub fn export_heatmap(h: &Heatmap, patch_size: usize, dir: &Path, stem: &str) -> Result<()> {
    let g = grid_side(h.values.len());
    let gray = to_gray(&h.values);
    netpbm::write(&dir.join(format!("{stem}.pgm")), &netpbm::encode_pgm(g, g, &gray))?;
    let side = g * patch_size;
    let px: Vec<u8> = (0..side * side).map(|p| gray[(p / side / patch_size) * g + (p % side) / patch_size]).collect();
    netpbm::write(&dir.join(format!("{stem}_px.pgm")), &netpbm::encode_pgm(side, side, &px))?;
    let mut csv = String::from("row,col,value\n");
    for (i, v) in h.values.iter().enumerate() {
        writeln!(csv, "{},{},{v:e}", i / g, i % g).expect("string write");
    }
    netpbm::write(&dir.join(format!("{stem}.csv")), csv.as_bytes())
}

pub fn export_mask(mask: &BinaryMask, patch_size: usize, path: &Path) -> Result<()> {
    let side = mask.grid * patch_size;
    netpbm::write(path, &netpbm::encode_pbm(side, side, &mask.pixels(patch_size)))
}
