//! Rationale-grounded vision-language encoders.

pub mod ablation;
pub mod bench;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod image;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod ontology;
pub mod rng;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
pub use model::Model;
