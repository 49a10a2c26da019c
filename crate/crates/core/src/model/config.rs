//! Model hyperparameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation function used inside MLP blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// GELU, tanh approximation (GPT-2's `gelu_new`).
    Gelu,
}

/// Architecture hyperparameters of a pre-layernorm decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ln_epsilon: f32,
    pub activation: Activation,
}

impl ModelConfig {
    /// Check the structural invariants of the config.
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(Error::InvalidConfig(format!(
                "d_head * n_heads = {} does not equal d_model = {}",
                self.d_head * self.n_heads,
                self.d_model
            )));
        }
        if !(self.ln_epsilon > 0.0) {
            return Err(Error::InvalidConfig("ln_epsilon must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
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

    #[test]
    fn valid_config_passes() {
        base().validate().unwrap();
    }

    #[test]
    fn head_dim_mismatch_rejected() {
        let mut c = base();
        c.d_head = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_count_rejected() {
        let mut c = base();
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn nonpositive_epsilon_rejected() {
        let mut c = base();
        c.ln_epsilon = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        base().to_json_file(&path).unwrap();
        let back = ModelConfig::from_json_file(&path).unwrap();
        assert_eq!(back, base());
    }
}
