//! Token sequences, next-token distributions and the plain forward pass.

use ndarray::{concatenate, Array2, Axis};

use crate::error::{Error, Result};
use crate::model::compute;
use crate::model::config::ModelConfig;
use crate::model::weights::Model;

/// A non-empty sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InputTooShort);
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Check length and id range against a model config.
    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        if self.ids.len() > config.max_seq_len {
            return Err(Error::InputTooLong {
                n: self.ids.len(),
                max: config.max_seq_len,
            });
        }
        for &id in &self.ids {
            if id as usize >= config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: config.vocab_size,
                });
            }
        }
        Ok(())
    }

    pub fn extended(&self, id: u32) -> Self {
        let mut ids = self.ids.clone();
        ids.push(id);
        Self { ids }
    }
}

/// A probability distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f32>,
}

impl Distribution {
    /// Validate non-negativity and normalization (sum within 1e-4 of 1).
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::MalformedContainer(
                "distribution has negative or non-finite entries".into(),
            ));
        }
        let sum: f64 = probs.iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::MalformedContainer(format!(
                "distribution sums to {sum}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    /// Index of the most probable token.
    pub fn argmax(&self) -> u32 {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as u32
    }
}

/// The plain (non-decomposed) forward pass: the reference output P_G that all
/// faithfulness comparisons are made against.
pub fn forward_dense(model: &Model, tokens: &TokenSequence) -> Result<Distribution> {
    tokens.validate_for(&model.config)?;
    let cfg = &model.config;
    let mut h = compute::embed(model, tokens.ids());
    for layer in &model.layers {
        let x1 = compute::layer_norm(h.view(), &layer.ln1, cfg.ln_epsilon);
        let pieces = compute::attention_pieces(layer, &x1, cfg.n_heads, cfg.d_head);

        // Fused attention output: concatenated per-head mixes through W_O.
        let mut mixed: Vec<Array2<f32>> = Vec::with_capacity(cfg.n_heads);
        for (alpha, vh) in pieces.alphas.iter().zip(&pieces.values) {
            mixed.push(alpha.dot(vh));
        }
        let views: Vec<_> = mixed.iter().map(|m| m.view()).collect();
        let concat = concatenate(Axis(1), &views).expect("head dims add up");
        let attn_out = concat.dot(&layer.wo) + &layer.bo;
        h += &attn_out;

        let x2 = compute::layer_norm(h.view(), &layer.ln2, cfg.ln_epsilon);
        let mlp_out = compute::mlp(layer, &x2);
        h += &mlp_out;
    }
    let probs = compute::output_probs(model, h.row(h.nrows() - 1));
    Distribution::new(probs)
}
