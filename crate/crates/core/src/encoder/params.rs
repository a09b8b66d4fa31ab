use autodiff::{Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};

use super::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::rng;

/// Indices of one transformer block's tensors.
#[derive(Debug, Clone)]
pub struct BlockIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

#[derive(Debug, Clone)]
pub struct VisionIdx {
    pub patch_w: usize,
    pub cls: usize,
    pub pos: usize,
    pub blocks: Vec<BlockIdx>,
    pub ln_post_g: usize,
    pub ln_post_b: usize,
    pub proj: usize,
}

#[derive(Debug, Clone)]
pub struct TextIdx {
    pub tok: usize,
    pub pos: usize,
    pub blocks: Vec<BlockIdx>,
    pub ln_final_g: usize,
    pub ln_final_b: usize,
    pub proj: usize,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Const(f64),
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn push(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }

    fn block(&mut self, prefix: &str, d: usize, hidden: usize, depth: usize) -> BlockIdx {
        let w = (d as f64).powf(-0.5);
        let out = w / (2.0 * depth as f64).sqrt();
        let hid = (hidden as f64).powf(-0.5) / (2.0 * depth as f64).sqrt();
        BlockIdx {
            ln1_g: self.push(format!("{prefix}.ln1.gain"), &[d], Init::Ones),
            ln1_b: self.push(format!("{prefix}.ln1.bias"), &[d], Init::Zeros),
            w_qkv: self.push(format!("{prefix}.attn.w_qkv"), &[d, 3 * d], Init::Normal(w)),
            b_qkv: self.push(format!("{prefix}.attn.b_qkv"), &[3 * d], Init::Zeros),
            w_o: self.push(format!("{prefix}.attn.w_o"), &[d, d], Init::Normal(out)),
            b_o: self.push(format!("{prefix}.attn.b_o"), &[d], Init::Zeros),
            ln2_g: self.push(format!("{prefix}.ln2.gain"), &[d], Init::Ones),
            ln2_b: self.push(format!("{prefix}.ln2.bias"), &[d], Init::Zeros),
            w_fc: self.push(format!("{prefix}.mlp.w_fc"), &[d, hidden], Init::Normal(w)),
            b_fc: self.push(format!("{prefix}.mlp.b_fc"), &[hidden], Init::Zeros),
            w_proj: self.push(format!("{prefix}.mlp.w_proj"), &[hidden, d], Init::Normal(hid)),
            b_proj: self.push(format!("{prefix}.mlp.b_proj"), &[d], Init::Zeros),
        }
    }
}

/// Every trainable tensor of both towers, in a fixed order derived from the
/// config, plus typed indices into that order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: EncoderConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    pub vision: VisionIdx,
    pub text: TextIdx,
    pub logit_scale: usize,
}

/// Default contrastive temperature; the stored logit scale is `ln(1/t)`.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

fn layout(c: &EncoderConfig) -> (Builder, VisionIdx, TextIdx, usize) {
    let mut b = Builder { names: Vec::new(), shapes: Vec::new(), inits: Vec::new() };
    let d = c.width;
    let hidden = d * c.mlp_ratio;
    let emb = 0.02;
    let vision = VisionIdx {
        patch_w: b.push("vision.patch_w".into(), &[c.patch_dim(), d], Init::Normal((c.patch_dim() as f64).powf(-0.5))),
        cls: b.push("vision.cls".into(), &[d], Init::Normal(emb)),
        pos: b.push("vision.pos".into(), &[c.tokens(), d], Init::Normal(emb)),
        blocks: (0..c.layers).map(|l| b.block(&format!("vision.blocks.{l}"), d, hidden, c.layers)).collect(),
        ln_post_g: b.push("vision.ln_post.gain".into(), &[d], Init::Ones),
        ln_post_b: b.push("vision.ln_post.bias".into(), &[d], Init::Zeros),
        proj: b.push("vision.proj".into(), &[d, c.joint_dim], Init::Normal((d as f64).powf(-0.5))),
    };
    let text = TextIdx {
        tok: b.push("text.tok".into(), &[c.vocab_size, d], Init::Normal(emb)),
        pos: b.push("text.pos".into(), &[c.text_len, d], Init::Normal(emb)),
        blocks: (0..c.text_layers).map(|l| b.block(&format!("text.blocks.{l}"), d, hidden, c.text_layers)).collect(),
        ln_final_g: b.push("text.ln_final.gain".into(), &[d], Init::Ones),
        ln_final_b: b.push("text.ln_final.bias".into(), &[d], Init::Zeros),
        proj: b.push("text.proj".into(), &[d, c.joint_dim], Init::Normal((d as f64).powf(-0.5))),
    };
    let logit_scale = b.push("logit_scale".into(), &[], Init::Const((1.0 / DEFAULT_TEMPERATURE).ln()));
    (b, vision, text, logit_scale)
}

impl ModelParams {
    /// Fresh parameters drawn from a stream keyed by `seed`.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (b, vision, text, logit_scale) = layout(config);
        let mut tensors = Vec::with_capacity(b.names.len());
        for (i, (shape, init)) in b.shapes.iter().zip(&b.inits).enumerate() {
            let n: usize = shape.iter().product();
            let data = match *init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(v) => vec![v; n],
                Init::Normal(std) => {
                    let mut r = rng::stream(seed, "param-init", &[i as u64]);
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut r)).collect()
                }
            };
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(ModelParams { config: config.clone(), names: b.names, tensors, vision, text, logit_scale })
    }

    /// Rebuild from named tensors, checking every name and shape against the
    /// layout implied by `config`.
    pub fn from_tensors(config: &EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (b, vision, text, logit_scale) = layout(config);
        if named.len() != b.names.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", b.names.len(), named.len())));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want {
                return Err(Error::Format(format!("expected tensor `{want}`, found `{name}`")));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            tensors.push(t);
        }
        Ok(ModelParams { config: config.clone(), names: b.names, tensors, vision, text, logit_scale })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn temperature(&self) -> f64 {
        (-self.tensors[self.logit_scale].item()).exp()
    }

    /// Register every tensor on `tape`: trainable leaves when `trainable`,
    /// constants otherwise.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Whether the weight at `idx` should receive decoupled weight decay.
    pub fn decays(&self, idx: usize) -> bool {
        let name = &self.names[idx];
        self.tensors[idx].rank() == 2 && !name.ends_with(".pos") && !name.ends_with(".tok")
    }

    /// Whether every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
