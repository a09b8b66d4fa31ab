use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture extents for the image and text towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Spatial patch tokens; always `(image_side / patch_size)^2`.
    pub patches: usize,
    pub width: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub joint_dim: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub text_layers: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            heads: 4,
            patches: 16,
            width: 64,
            patch_size: 8,
            image_side: 32,
            joint_dim: 32,
            vocab_size: 64,
            text_len: 16,
            text_layers: 2,
            mlp_ratio: 4,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("patches", self.patches),
            ("width", self.width),
            ("patch_size", self.patch_size),
            ("image_side", self.image_side),
            ("joint_dim", self.joint_dim),
            ("vocab_size", self.vocab_size),
            ("text_len", self.text_len),
            ("text_layers", self.text_layers),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_side {} not divisible by patch_size {}",
                self.image_side, self.patch_size
            )));
        }
        let g = self.image_side / self.patch_size;
        if self.patches != g * g {
            return Err(Error::Config(format!("patches is {} but the patch grid has {} cells", self.patches, g * g)));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Patches per side of the grid.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    /// Tokens including the class token.
    pub fn tokens(&self) -> usize {
        self.patches + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}
