//! Deterministic tiny model and tokenizer, used by tests, the demo CLI
//! subcommand and the documentation examples.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::config::{Activation, ModelConfig};
use crate::model::tokenizer::Tokenizer;
use crate::model::weights::{LayerNormWeights, LayerWeights, Model};

/// Config of the tiny fixture model: 2 layers, 2 heads, d_model 8, 11 tokens.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_mlp: 32,
        vocab_size: 11,
        max_seq_len: 32,
        ln_epsilon: 1e-5,
        activation: Activation::Gelu,
    }
}

fn mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn vec1(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> Array1<f32> {
    Array1::from_shape_fn(len, |_| rng.random_range(-scale..scale))
}

/// Generate the tiny model with weights drawn from a seeded generator.
/// Identical seeds produce identical models, bit for bit.
pub fn tiny_model(seed: u64) -> Model {
    let config = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let w = 0.45f32; // wide enough to make attention patterns uneven

    let wte = mat(&mut rng, config.vocab_size, d, w);
    let wpe = mat(&mut rng, config.max_seq_len, d, 0.2);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            ln1: LayerNormWeights {
                weight: &vec1(&mut rng, d, 0.15) + 1.0,
                bias: vec1(&mut rng, d, 0.1),
            },
            wq: mat(&mut rng, d, d, w),
            bq: vec1(&mut rng, d, 0.1),
            wk: mat(&mut rng, d, d, w),
            bk: vec1(&mut rng, d, 0.1),
            wv: mat(&mut rng, d, d, w),
            bv: vec1(&mut rng, d, 0.1),
            wo: mat(&mut rng, d, d, w),
            bo: vec1(&mut rng, d, 0.1),
            ln2: LayerNormWeights {
                weight: &vec1(&mut rng, d, 0.15) + 1.0,
                bias: vec1(&mut rng, d, 0.1),
            },
            w_in: mat(&mut rng, d, config.d_mlp, w),
            b_in: vec1(&mut rng, config.d_mlp, 0.1),
            w_out: mat(&mut rng, config.d_mlp, d, w),
            b_out: vec1(&mut rng, d, 0.1),
        });
    }
    let ln_f = LayerNormWeights {
        weight: &vec1(&mut rng, d, 0.15) + 1.0,
        bias: vec1(&mut rng, d, 0.1),
    };
    Model {
        config,
        wte,
        wpe,
        layers,
        ln_f,
        unembed: None,
    }
}

/// Tokenizer over the fixture's 11-token vocabulary: the letters a..j plus
/// the space marker, no merges.
pub fn tiny_tokenizer() -> Tokenizer {
    let mut vocab = HashMap::new();
    for (i, c) in ('a'..='j').enumerate() {
        vocab.insert(c.to_string(), i as u32);
    }
    vocab.insert("\u{0120}".to_string(), 10); // byte-alphabet image of ' '
    Tokenizer::new(vocab, Vec::new()).expect("fixture vocab is well-formed")
}

/// Write a complete model directory (config.json, model.safetensors,
/// vocab.json, merges.txt) that `Model::load_dir` and the CLI accept.
pub fn write_model_dir(dir: &Path, model: &Model, tokenizer: &Tokenizer) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    model.config.to_json_file(&dir.join("config.json"))?;
    model.to_container().write_file(&dir.join("model.safetensors"))?;
    tokenizer.to_files(&dir.join("vocab.json"), &dir.join("merges.txt"))?;
    Ok(())
}
