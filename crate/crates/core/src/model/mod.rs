//! Model runtime: weights, tokenizer, plain forward pass and sampling.

pub mod config;
pub(crate) mod compute;
pub mod forward;
pub mod sample;
pub mod tokenizer;
pub mod weights;

use std::path::Path;

use crate::error::Result;

pub use config::{Activation, ModelConfig};
pub use forward::{forward_dense, Distribution, TokenSequence};
pub use sample::{generate, nucleus_sample};
pub use tokenizer::Tokenizer;
pub use weights::{Model, TensorContainer};

/// A model plus its tokenizer, loaded from one directory holding
/// `config.json`, `model.safetensors`, `vocab.json` and `merges.txt`.
pub struct ModelDir {
    pub model: Model,
    pub tokenizer: Tokenizer,
}

impl ModelDir {
    pub fn load(dir: &Path) -> Result<Self> {
        for name in ["config.json", "model.safetensors", "vocab.json", "merges.txt"] {
            if !dir.join(name).exists() {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("`{}` not found in model dir {}", name, dir.display()),
                )
                .into());
            }
        }
        let model = Model::load(&dir.join("model.safetensors"), &dir.join("config.json"))?;
        let tokenizer = Tokenizer::from_files(&dir.join("vocab.json"), &dir.join("merges.txt"))?;
        Ok(Self { model, tokenizer })
    }
}
