use std::path::Path;

use crate::encoder::{self, load_checkpoint, save_checkpoint, unit, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tokenizer::Tokenizer;

/// Encoder parameters bundled with the vocabulary they were trained on.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ModelParams,
    pub tokenizer: Tokenizer,
}

impl Model {
    /// Fresh model whose text vocabulary covers `corpus`.
    pub fn init<S: AsRef<str>>(config: &EncoderConfig, corpus: &[S], seed: u64) -> Result<Self> {
        let tokenizer = Tokenizer::build(corpus);
        let config = EncoderConfig { vocab_size: tokenizer.vocab_size(), ..config.clone() };
        Ok(Model { params: ModelParams::init(&config, seed)?, tokenizer })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.params.config()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(&self.params, Some(&self.tokenizer), dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (params, vocab) = load_checkpoint(dir)?;
        let tokenizer = vocab.ok_or_else(|| Error::Format(format!("{}: checkpoint has no vocabulary", dir.display())))?;
        if tokenizer.vocab_size() != params.config().vocab_size {
            return Err(Error::Format("vocabulary size disagrees with config".into()));
        }
        Ok(Model { params, tokenizer })
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids = self.tokenizer.tokenize(text);
        if ids.is_empty() {
            return Err(Error::Argument(format!("text `{text}` has no tokens")));
        }
        Ok(ids)
    }

    /// Unit-length text embeddings.
    pub fn text_embeddings<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Vec<f64>>> {
        let ids: Vec<Vec<usize>> = texts.iter().map(|t| self.tokenize(t.as_ref())).collect::<Result<_>>()?;
        let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
        Ok(encoder::encode_texts(&refs, &self.params)?.into_iter().map(|e| unit(&e.vector)).collect())
    }

    /// Unit-length image embeddings.
    pub fn image_embeddings(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        Ok(encoder::encode_images(images, &self.params, false)?.into_iter().map(|(e, _)| unit(&e.vector)).collect())
    }
}
