//! Masked forward passes: zero-ablation of individual graph edges.
//!
//! A masked run is a fresh forward pass in which every edge contribution is
//! multiplied by its mask bit. Attention weights and LayerNorm statistics are
//! recomputed from the masked stream, so everything downstream of a masked
//! edge reflects its removal. The attention output bias is added
//! unconditionally (it is not an edge); the MLP biases travel inside the MLP
//! edge.

use std::collections::HashSet;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::EdgeId;
use crate::model::compute;
use crate::model::config::ModelConfig;
use crate::model::forward::{Distribution, TokenSequence};
use crate::model::weights::Model;
use crate::trace::Trace;

/// Dense bit view of an edge set, indexed arithmetically for the inner loops.
struct EdgeMask {
    n: usize,
    n_heads: usize,
    attn_res: Vec<bool>,
    mlp_res: Vec<bool>,
    mlp: Vec<bool>,
    /// Layout: `layer * (H*n*n) + head * (n*n) + tgt * n + src`.
    attn: Vec<bool>,
}

impl EdgeMask {
    fn none(config: &ModelConfig, n: usize) -> Self {
        Self {
            n,
            n_heads: config.n_heads,
            attn_res: vec![false; config.n_layers * n],
            mlp_res: vec![false; config.n_layers * n],
            mlp: vec![false; config.n_layers * n],
            attn: vec![false; config.n_layers * config.n_heads * n * n],
        }
    }

    fn all(config: &ModelConfig, n: usize) -> Self {
        Self {
            n,
            n_heads: config.n_heads,
            attn_res: vec![true; config.n_layers * n],
            mlp_res: vec![true; config.n_layers * n],
            mlp: vec![true; config.n_layers * n],
            attn: vec![true; config.n_layers * config.n_heads * n * n],
        }
    }

    fn from_edges<'a>(
        edges: impl IntoIterator<Item = &'a EdgeId>,
        config: &ModelConfig,
        value: bool,
        mut base: Self,
    ) -> Result<Self> {
        for &edge in edges {
            base.set(edge, config, value)?;
        }
        Ok(base)
    }

    fn set(&mut self, edge: EdgeId, config: &ModelConfig, value: bool) -> Result<()> {
        let n = self.n;
        let mismatch = |e: EdgeId| Error::TraceMismatch(e.to_string());
        match edge {
            EdgeId::AttnResidual { layer, pos } => {
                if layer >= config.n_layers || pos >= n {
                    return Err(mismatch(edge));
                }
                self.attn_res[layer * n + pos] = value;
            }
            EdgeId::MlpResidual { layer, pos } => {
                if layer >= config.n_layers || pos >= n {
                    return Err(mismatch(edge));
                }
                self.mlp_res[layer * n + pos] = value;
            }
            EdgeId::Mlp { layer, pos } => {
                if layer >= config.n_layers || pos >= n {
                    return Err(mismatch(edge));
                }
                self.mlp[layer * n + pos] = value;
            }
            EdgeId::Attention {
                layer,
                head,
                src,
                tgt,
            } => {
                if layer >= config.n_layers || head >= config.n_heads || tgt >= n || src > tgt {
                    return Err(mismatch(edge));
                }
                self.attn[((layer * self.n_heads + head) * n + tgt) * n + src] = value;
            }
        }
        Ok(())
    }

    #[inline]
    fn attn_bit(&self, layer: usize, head: usize, tgt: usize, src: usize) -> bool {
        self.attn[((layer * self.n_heads + head) * self.n + tgt) * self.n + src]
    }
}

fn masked_forward(model: &Model, tokens: &TokenSequence, mask: &EdgeMask) -> Distribution {
    let cfg = &model.config;
    let n = tokens.len();
    let d = cfg.d_model;
    let mut h = compute::embed(model, tokens.ids());

    for (l, layer) in model.layers.iter().enumerate() {
        let x1 = compute::layer_norm(h.view(), &layer.ln1, cfg.ln_epsilon);
        let pieces = compute::attention_pieces(layer, &x1, cfg.n_heads, cfg.d_head);
        let head_src = compute::project_sources(layer, &pieces.values, cfg.d_head);

        // Masked node update, same accumulation order as the decomposition:
        // residual, heads ascending, sources ascending, then the output bias.
        let bo = layer.bo.as_slice().expect("contiguous");
        let mut after_attn = Array2::<f32>::zeros((n, d));
        for i in 0..n {
            let mut row = if mask.attn_res[l * n + i] {
                h.row(i).to_vec()
            } else {
                vec![0.0f32; d]
            };
            for (k, (alpha, hs)) in pieces.alphas.iter().zip(&head_src).enumerate() {
                for j in 0..=i {
                    if !mask.attn_bit(l, k, i, j) {
                        continue;
                    }
                    let a = alpha[[i, j]];
                    let src = hs.row(j);
                    let src = src.as_slice().expect("contiguous");
                    for (r, &s) in row.iter_mut().zip(src) {
                        *r += a * s;
                    }
                }
            }
            for (r, &b) in row.iter_mut().zip(bo) {
                *r += b;
            }
            after_attn
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from_shape(d, &row).unwrap());
        }

        // MLP rows are only needed where the MLP edge is kept.
        let rows_needed: Vec<usize> = (0..n).filter(|&i| mask.mlp[l * n + i]).collect();
        let mlp_rows: Option<Array2<f32>> = if rows_needed.is_empty() {
            None
        } else {
            let mut gathered = Array2::<f32>::zeros((rows_needed.len(), d));
            for (r, &i) in rows_needed.iter().enumerate() {
                gathered.row_mut(r).assign(&after_attn.row(i));
            }
            let x2 = compute::layer_norm(gathered.view(), &layer.ln2, cfg.ln_epsilon);
            Some(compute::mlp(layer, &x2))
        };

        let mut after_mlp = Array2::<f32>::zeros((n, d));
        for i in 0..n {
            if mask.mlp_res[l * n + i] {
                after_mlp.row_mut(i).assign(&after_attn.row(i));
            }
        }
        if let Some(mlp_rows) = &mlp_rows {
            for (r, &i) in rows_needed.iter().enumerate() {
                let mut row = after_mlp.row_mut(i);
                row += &mlp_rows.row(r);
            }
        }
        h = after_mlp;
    }

    let probs = compute::output_probs(model, h.row(n - 1));
    Distribution::new(probs).expect("softmax output is normalized")
}

/// Run the model with a trace's binary edge mask applied (zero-ablation),
/// producing the trace distribution P_T.
pub fn run_masked(model: &Model, tokens: &TokenSequence, trace: &Trace) -> Result<Distribution> {
    tokens.validate_for(&model.config)?;
    let mask = EdgeMask::from_edges(
        &trace.kept,
        &model.config,
        true,
        EdgeMask::none(&model.config, tokens.len()),
    )?;
    Ok(masked_forward(model, tokens, &mask))
}

/// Zero-ablate exactly the given edges, keeping everything else: the
/// necessity evaluation. Residual edges are never ablatable; the set must
/// stay within the ancestor edges of the final position.
pub fn run_ablated(
    model: &Model,
    tokens: &TokenSequence,
    ablate: &HashSet<EdgeId>,
) -> Result<Distribution> {
    tokens.validate_for(&model.config)?;
    let n = tokens.len();
    let last_layer = model.config.n_layers - 1;
    for edge in ablate {
        if edge.is_residual() {
            return Err(Error::ResidualAblationForbidden);
        }
        let (layer, tgt) = match *edge {
            EdgeId::Attention { layer, tgt, .. } => (layer, tgt),
            EdgeId::Mlp { layer, pos } => (layer, pos),
            _ => unreachable!("residuals rejected above"),
        };
        // Ancestors of the final position: everything below the last layer,
        // plus last-layer edges targeting the final position.
        if layer > last_layer || (layer == last_layer && tgt != n - 1) {
            return Err(Error::TraceMismatch(edge.to_string()));
        }
    }
    let mask = EdgeMask::from_edges(
        ablate,
        &model.config,
        false,
        EdgeMask::all(&model.config, n),
    )?;
    Ok(masked_forward(model, tokens, &mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;
    use crate::graph::decompose_forward;
    use crate::model::forward::forward_dense;
    use crate::trace::{complement_for_necessity, empty_trace, extract_trace, full_trace};

    fn tv(p: &Distribution, q: &Distribution) -> f64 {
        p.probs()
            .iter()
            .zip(q.probs())
            .map(|(&a, &b)| ((a as f64) - (b as f64)).abs())
            .sum::<f64>()
            / 2.0
    }

    fn setup(ids: &[u32]) -> (Model, TokenSequence) {
        let model = fixture::tiny_model(42);
        (model, TokenSequence::new(ids.to_vec()).unwrap())
    }

    use crate::model::weights::Model;

    #[test]
    fn full_trace_reproduces_dense_forward() {
        let (model, tokens) = setup(&[3, 1, 4, 1, 5, 9, 2, 6]);
        let run = decompose_forward(&model, &tokens).unwrap();
        let p_g = forward_dense(&model, &tokens).unwrap();
        let p_t = run_masked(&model, &tokens, &full_trace(&run)).unwrap();
        assert!(tv(&p_g, &p_t) <= 1e-4, "tv = {}", tv(&p_g, &p_t));
    }

    #[test]
    fn empty_trace_is_finite() {
        let (model, tokens) = setup(&[2, 7, 1]);
        let run = decompose_forward(&model, &tokens).unwrap();
        let p_t = run_masked(&model, &tokens, &empty_trace(&run)).unwrap();
        assert!(p_t.probs().iter().all(|p| p.is_finite()));
        let sum: f64 = p_t.probs().iter().map(|&p| p as f64).sum();
        assert!((sum - 1.0).abs() < 1e-4);
    }

    #[test]
    fn single_final_layer_edge_matches_subtraction_oracle() {
        let (model, tokens) = setup(&[1, 8, 3, 6, 2]);
        let run = decompose_forward(&model, &tokens).unwrap();
        let last = run.n_layers() - 1;
        let tgt = run.n() - 1;
        let edge = EdgeId::Attention {
            layer: last,
            head: 1,
            src: 2,
            tgt,
        };

        let mut trace = full_trace(&run);
        trace.kept.remove(&edge);
        let masked = run_masked(&model, &tokens, &trace).unwrap();

        // Oracle: subtract the edge vector from the post-attention state and
        // redo the final MLP sublayer and the output head by hand.
        let phi = run.edge_vector(edge).unwrap();
        let h_bar = run
            .node_state(crate::graph::NodeId::AfterAttention { layer: last, pos: tgt })
            .unwrap()
            .to_owned();
        let h_bar_masked = &h_bar - &phi;
        let layer = &model.layers[last];
        let x2 = compute::layer_norm_row(
            h_bar_masked.view(),
            &layer.ln2,
            model.config.ln_epsilon,
        );
        let mut hidden = x2.dot(&layer.w_in) + &layer.b_in;
        hidden.mapv_inplace(|v| {
            0.5 * v * (1.0 + (0.797_884_56_f32 * (v + 0.044_715 * v * v * v)).tanh())
        });
        let mlp_out = hidden.dot(&layer.w_out) + &layer.b_out;
        let final_state = &h_bar_masked + &mlp_out;
        let oracle =
            Distribution::new(compute::output_probs(&model, final_state.view())).unwrap();

        assert!(
            tv(&oracle, &masked) <= 1e-4,
            "tv vs oracle = {}",
            tv(&oracle, &masked)
        );
        // And the ablation visibly changed the output.
        let p_g = forward_dense(&model, &tokens).unwrap();
        assert!(tv(&p_g, &masked) > 0.0);
    }

    #[test]
    fn trace_position_overflow_is_rejected() {
        let (model, tokens) = setup(&[1, 2]);
        let run = decompose_forward(&model, &tokens).unwrap();
        let mut trace = full_trace(&run);
        trace.kept.insert(EdgeId::Mlp { layer: 0, pos: 9 });
        assert!(matches!(
            run_masked(&model, &tokens, &trace),
            Err(Error::TraceMismatch(_))
        ));
    }

    #[test]
    fn ablating_nothing_is_identity() {
        let (model, tokens) = setup(&[4, 4, 8, 1]);
        let p_g = forward_dense(&model, &tokens).unwrap();
        let p = run_ablated(&model, &tokens, &HashSet::new()).unwrap();
        assert!(tv(&p_g, &p) <= 1e-4);
    }

    #[test]
    fn ablating_all_nonresidual_edges_degrades_badly() {
        let (model, tokens) = setup(&[9, 0, 2, 5, 7, 3]);
        let run = decompose_forward(&model, &tokens).unwrap();
        let ablate = complement_for_necessity(&full_trace(&run));
        let p_g = forward_dense(&model, &tokens).unwrap();
        let p = run_ablated(&model, &tokens, &ablate).unwrap();
        assert!(tv(&p_g, &p) > 0.1, "tv = {}", tv(&p_g, &p));
    }

    #[test]
    fn residual_ablation_is_forbidden() {
        let (model, tokens) = setup(&[1, 2, 3]);
        let mut ablate = HashSet::new();
        ablate.insert(EdgeId::AttnResidual { layer: 0, pos: 1 });
        assert!(matches!(
            run_ablated(&model, &tokens, &ablate),
            Err(Error::ResidualAblationForbidden)
        ));
    }

    #[test]
    fn nonancestor_ablation_is_rejected() {
        let (model, tokens) = setup(&[1, 2, 3]);
        let mut ablate = HashSet::new();
        // Last-layer MLP edge at a non-final position has no path onward.
        ablate.insert(EdgeId::Mlp { layer: 1, pos: 0 });
        assert!(matches!(
            run_ablated(&model, &tokens, &ablate),
            Err(Error::TraceMismatch(_))
        ));
    }

    #[test]
    fn masked_run_is_deterministic() {
        let (model, tokens) = setup(&[6, 2, 9, 4, 1]);
        let run = decompose_forward(&model, &tokens).unwrap();
        let trace = extract_trace(&run, 1e-3).unwrap();
        let a = run_masked(&model, &tokens, &trace).unwrap();
        let b = run_masked(&model, &tokens, &trace).unwrap();
        assert_eq!(a.probs(), b.probs());
    }
}
