//! Shared numeric primitives for the forward passes.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::model::weights::{LayerNormWeights, LayerWeights, Model};

/// GELU, tanh approximation.
pub(crate) fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_56;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Row-wise layer normalization.
pub(crate) fn layer_norm(x: ArrayView2<f32>, ln: &LayerNormWeights, eps: f32) -> Array2<f32> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        normalize_row(row.as_slice_mut().expect("contiguous"), ln, eps);
    }
    out
}

pub(crate) fn layer_norm_row(x: ArrayView1<f32>, ln: &LayerNormWeights, eps: f32) -> Array1<f32> {
    let mut out = x.to_owned();
    normalize_row(out.as_slice_mut().expect("contiguous"), ln, eps);
    out
}

fn normalize_row(row: &mut [f32], ln: &LayerNormWeights, eps: f32) {
    let d = row.len() as f32;
    let mean = row.iter().sum::<f32>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
    let inv_std = 1.0 / (var + eps).sqrt();
    let w = ln.weight.as_slice().expect("contiguous");
    let b = ln.bias.as_slice().expect("contiguous");
    for ((v, &wi), &bi) in row.iter_mut().zip(w).zip(b) {
        *v = (*v - mean) * inv_std * wi + bi;
    }
}

/// Token plus learned positional embeddings, the graph's source states.
pub(crate) fn embed(model: &Model, ids: &[u32]) -> Array2<f32> {
    let d = model.config.d_model;
    let mut h = Array2::zeros((ids.len(), d));
    for (i, &id) in ids.iter().enumerate() {
        let row = &model.wte.row(id as usize) + &model.wpe.row(i);
        h.row_mut(i).assign(&row);
    }
    h
}

/// Per-head causal attention weights and value vectors for one layer,
/// computed from the already-normalized input `x1`.
///
/// `alphas[k]` is `[n, n]` (target-major, zero above the diagonal);
/// `values[k]` is `[n, d_head]`.
pub(crate) struct AttentionPieces {
    pub alphas: Vec<Array2<f32>>,
    pub values: Vec<Array2<f32>>,
}

pub(crate) fn attention_pieces(
    layer: &LayerWeights,
    x1: &Array2<f32>,
    n_heads: usize,
    d_head: usize,
) -> AttentionPieces {
    let n = x1.nrows();
    let q = x1.dot(&layer.wq) + &layer.bq;
    let k = x1.dot(&layer.wk) + &layer.bk;
    let v = x1.dot(&layer.wv) + &layer.bv;
    let scale = 1.0 / (d_head as f32).sqrt();

    let mut alphas = Vec::with_capacity(n_heads);
    let mut values = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * d_head..(h + 1) * d_head];
        let qh = q.slice(cols);
        let kh = k.slice(cols);

        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|x| x * scale);
        let mut alpha = Array2::zeros((n, n));
        for i in 0..n {
            let row = scores.row(i);
            let max = row
                .iter()
                .take(i + 1)
                .fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut denom = 0.0f32;
            let mut exps = vec![0.0f32; i + 1];
            for j in 0..=i {
                let e = (row[j] - max).exp();
                exps[j] = e;
                denom += e;
            }
            for j in 0..=i {
                alpha[[i, j]] = exps[j] / denom;
            }
        }
        alphas.push(alpha);
        values.push(v.slice(cols).to_owned());
    }
    AttentionPieces { alphas, values }
}

/// Push each head's value vectors through that head's slice of the output
/// projection: row `j` of the result is the d_model-dimensional vector that
/// head `k` would move from source `j` (before weighting by attention).
pub(crate) fn project_sources(
    layer: &LayerWeights,
    values: &[Array2<f32>],
    d_head: usize,
) -> Vec<Array2<f32>> {
    values
        .iter()
        .enumerate()
        .map(|(h, vh)| {
            let wo_slice = layer.wo.slice(s![h * d_head..(h + 1) * d_head, ..]);
            vh.dot(&wo_slice)
        })
        .collect()
}

/// `gelu(x @ w_in + b_in) @ w_out + b_out` for a batch of rows.
pub(crate) fn mlp(layer: &LayerWeights, x2: &Array2<f32>) -> Array2<f32> {
    let mut hidden = x2.dot(&layer.w_in) + &layer.b_in;
    hidden.mapv_inplace(gelu);
    hidden.dot(&layer.w_out) + &layer.b_out
}

/// Softmax over the unembedded, final-layernormed state. The normalizer is
/// accumulated in f64: a sequential f32 sum over a 50k vocabulary drifts
/// past the 1e-4 normalization tolerance.
pub(crate) fn output_probs(model: &Model, last_state: ArrayView1<f32>) -> Vec<f32> {
    let y = layer_norm_row(last_state, &model.ln_f, model.config.ln_epsilon);
    let logits = model.unembedding().dot(&y);
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().map(|&e| e as f64).sum();
    exps.iter().map(|&e| (e as f64 / sum) as f32).collect()
}
