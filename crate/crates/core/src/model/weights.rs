//! Named-tensor container and model weights.
//!
//! The on-disk format is the de-facto "safetensors" layout: an 8-byte
//! little-endian header length, a UTF-8 JSON header mapping tensor names to
//! `{dtype, shape, data_offsets}`, then raw row-major tensor data. Only F32
//! tensors are supported.
//!
//! Tensor naming scheme (all projections act as `y = x @ W + b`):
//!
//! ```text
//! wte                     [vocab_size, d_model]
//! wpe                     [max_seq_len, d_model]
//! layers.{l}.ln1.weight   [d_model]
//! layers.{l}.ln1.bias     [d_model]
//! layers.{l}.attn.wq      [d_model, d_model]     (likewise wk, wv, wo)
//! layers.{l}.attn.bq      [d_model]              (likewise bk, bv, bo)
//! layers.{l}.ln2.weight   [d_model]
//! layers.{l}.ln2.bias     [d_model]
//! layers.{l}.mlp.w_in     [d_model, d_mlp]
//! layers.{l}.mlp.b_in     [d_mlp]
//! layers.{l}.mlp.w_out    [d_mlp, d_model]
//! layers.{l}.mlp.b_out    [d_model]
//! ln_f.weight             [d_model]
//! ln_f.bias               [d_model]
//! unembed                 [vocab_size, d_model]  (optional; defaults to wte)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// In-memory set of named F32 tensors, readable from and writable to the
/// container format above.
#[derive(Debug, Default)]
pub struct TensorContainer {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch for {name}"
        );
        self.tensors.insert(name.to_string(), (shape, data));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 8 {
            return Err(Error::MalformedContainer("file shorter than header".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let data_start = 8 + header_len;
        if data_start > bytes.len() {
            return Err(Error::MalformedContainer(format!(
                "header length {header_len} exceeds file size"
            )));
        }
        let header: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..data_start])?;
        let data = &bytes[data_start..];

        let mut tensors = BTreeMap::new();
        for (name, value) in header {
            if name == "__metadata__" {
                continue;
            }
            let info: TensorInfo = serde_json::from_value(value)?;
            if info.dtype != "F32" {
                return Err(Error::MalformedContainer(format!(
                    "tensor `{name}` has unsupported dtype {}",
                    info.dtype
                )));
            }
            let [begin, end] = info.data_offsets;
            let n_elems: usize = info.shape.iter().product();
            if end < begin || end > data.len() || end - begin != n_elems * 4 {
                return Err(Error::MalformedContainer(format!(
                    "tensor `{name}` has inconsistent offsets"
                )));
            }
            let values: Vec<f32> = data[begin..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, (info.shape, values));
        }
        Ok(Self { tensors })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut header = BTreeMap::new();
        let mut offset = 0usize;
        for (name, (shape, data)) in &self.tensors {
            let nbytes = data.len() * 4;
            header.insert(
                name.clone(),
                TensorInfo {
                    dtype: "F32".to_string(),
                    shape: shape.clone(),
                    data_offsets: [offset, offset + nbytes],
                },
            );
            offset += nbytes;
        }
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + header_json.len() + offset);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, (_, data)) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Remove a 2-D tensor, checking shape and finiteness.
    fn take_2d(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let (shape, data) = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if shape != [rows, cols] {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: vec![rows, cols],
                found: shape,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteWeight(name.to_string()));
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
    }

    fn take_1d(&mut self, name: &str, len: usize) -> Result<Array1<f32>> {
        let (shape, data) = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if shape != [len] {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: vec![len],
                found: shape,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteWeight(name.to_string()));
        }
        Ok(Array1::from_vec(data))
    }
}

/// LayerNorm scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNormWeights {
    pub weight: Array1<f32>,
    pub bias: Array1<f32>,
}

/// Weights of one residual block.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1: LayerNormWeights,
    pub wq: Array2<f32>,
    pub bq: Array1<f32>,
    pub wk: Array2<f32>,
    pub bk: Array1<f32>,
    pub wv: Array2<f32>,
    pub bv: Array1<f32>,
    pub wo: Array2<f32>,
    pub bo: Array1<f32>,
    pub ln2: LayerNormWeights,
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

/// A loaded model: config plus all weight tensors, immutable after load.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub wte: Array2<f32>,
    pub wpe: Array2<f32>,
    pub layers: Vec<LayerWeights>,
    pub ln_f: LayerNormWeights,
    /// Separate unembedding matrix; `None` means tied to `wte`.
    pub unembed: Option<Array2<f32>>,
}

impl Model {
    /// Build a model from a tensor container, validating every shape.
    pub fn from_container(mut container: TensorContainer, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let wte = container.take_2d("wte", config.vocab_size, d)?;
        let wpe = container.take_2d("wpe", config.max_seq_len, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            layers.push(LayerWeights {
                ln1: LayerNormWeights {
                    weight: container.take_1d(&format!("{p}.ln1.weight"), d)?,
                    bias: container.take_1d(&format!("{p}.ln1.bias"), d)?,
                },
                wq: container.take_2d(&format!("{p}.attn.wq"), d, d)?,
                bq: container.take_1d(&format!("{p}.attn.bq"), d)?,
                wk: container.take_2d(&format!("{p}.attn.wk"), d, d)?,
                bk: container.take_1d(&format!("{p}.attn.bk"), d)?,
                wv: container.take_2d(&format!("{p}.attn.wv"), d, d)?,
                bv: container.take_1d(&format!("{p}.attn.bv"), d)?,
                wo: container.take_2d(&format!("{p}.attn.wo"), d, d)?,
                bo: container.take_1d(&format!("{p}.attn.bo"), d)?,
                ln2: LayerNormWeights {
                    weight: container.take_1d(&format!("{p}.ln2.weight"), d)?,
                    bias: container.take_1d(&format!("{p}.ln2.bias"), d)?,
                },
                w_in: container.take_2d(&format!("{p}.mlp.w_in"), d, config.d_mlp)?,
                b_in: container.take_1d(&format!("{p}.mlp.b_in"), config.d_mlp)?,
                w_out: container.take_2d(&format!("{p}.mlp.w_out"), config.d_mlp, d)?,
                b_out: container.take_1d(&format!("{p}.mlp.b_out"), d)?,
            });
        }
        let ln_f = LayerNormWeights {
            weight: container.take_1d("ln_f.weight", d)?,
            bias: container.take_1d("ln_f.bias", d)?,
        };
        let unembed = if container.names().any(|n| n == "unembed") {
            Some(container.take_2d("unembed", config.vocab_size, d)?)
        } else {
            None
        };
        Ok(Self {
            config,
            wte,
            wpe,
            layers,
            ln_f,
            unembed,
        })
    }

    /// Load a model from a weights container and a JSON config file.
    pub fn load(weights_path: &Path, config_path: &Path) -> Result<Self> {
        let config = ModelConfig::from_json_file(config_path)?;
        let container = TensorContainer::read_file(weights_path)?;
        Self::from_container(container, config)
    }

    /// Serialize all weights back into a container.
    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        let push2 = |c: &mut TensorContainer, name: &str, a: &Array2<f32>| {
            c.insert(name, a.shape().to_vec(), a.iter().copied().collect());
        };
        let push1 = |c: &mut TensorContainer, name: &str, a: &Array1<f32>| {
            c.insert(name, vec![a.len()], a.to_vec());
        };
        push2(&mut c, "wte", &self.wte);
        push2(&mut c, "wpe", &self.wpe);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            push1(&mut c, &format!("{p}.ln1.weight"), &layer.ln1.weight);
            push1(&mut c, &format!("{p}.ln1.bias"), &layer.ln1.bias);
            push2(&mut c, &format!("{p}.attn.wq"), &layer.wq);
            push1(&mut c, &format!("{p}.attn.bq"), &layer.bq);
            push2(&mut c, &format!("{p}.attn.wk"), &layer.wk);
            push1(&mut c, &format!("{p}.attn.bk"), &layer.bk);
            push2(&mut c, &format!("{p}.attn.wv"), &layer.wv);
            push1(&mut c, &format!("{p}.attn.bv"), &layer.bv);
            push2(&mut c, &format!("{p}.attn.wo"), &layer.wo);
            push1(&mut c, &format!("{p}.attn.bo"), &layer.bo);
            push1(&mut c, &format!("{p}.ln2.weight"), &layer.ln2.weight);
            push1(&mut c, &format!("{p}.ln2.bias"), &layer.ln2.bias);
            push2(&mut c, &format!("{p}.mlp.w_in"), &layer.w_in);
            push1(&mut c, &format!("{p}.mlp.b_in"), &layer.b_in);
            push2(&mut c, &format!("{p}.mlp.w_out"), &layer.w_out);
            push1(&mut c, &format!("{p}.mlp.b_out"), &layer.b_out);
        }
        push1(&mut c, "ln_f.weight", &self.ln_f.weight);
        push1(&mut c, "ln_f.bias", &self.ln_f.bias);
        if let Some(u) = &self.unembed {
            push2(&mut c, "unembed", u);
        }
        c
    }

    /// Row `v` of the unembedding matrix (tied to `wte` when separate weights
    /// are absent).
    pub fn unembedding(&self) -> &Array2<f32> {
        self.unembed.as_ref().unwrap_or(&self.wte)
    }
}
