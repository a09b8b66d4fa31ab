use std::fs;
use std::path::Path;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

pub const MANIFEST_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "model.bin";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the weights file.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Tokenizer>,
    tensors: Vec<Entry>,
}

/// Write `model.json` and `model.bin` into `dir`.
pub fn save_checkpoint(params: &ModelParams, vocab: Option<&Tokenizer>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(params.count() * 8);
    let mut entries = Vec::with_capacity(params.tensors().len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        entries.push(Entry { name: name.clone(), shape: t.shape().to_vec(), offset: blob.len() });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { config: params.config().clone(), vocab: vocab.cloned(), tensors: entries };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(WEIGHTS_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, Option<Tokenizer>)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    let bpath = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

    let mut expected = 0usize;
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.offset != expected {
            return Err(Error::Format(format!("tensor `{}` at offset {}, expected {expected}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let end = expected + n * 8;
        if end > blob.len() {
            return Err(Error::Format(format!("weights file is {} bytes, tensor `{}` needs {end}", blob.len(), e.name)));
        }
        let data = blob[expected..end].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(e.shape, data).map_err(|err| Error::Format(format!("tensor `{}`: {err}", e.name)))?;
        named.push((e.name, t));
        expected = end;
    }
    if expected != blob.len() {
        return Err(Error::Format(format!("weights file is {} bytes, manifest accounts for {expected}", blob.len())));
    }
    let params = ModelParams::from_tensors(&manifest.config, named)?;
    Ok((params, manifest.vocab))
}
