//! Edge-level decomposition of the forward pass.
//!
//! The pass is materialized as a DAG whose nodes are per-layer, per-position
//! token states and whose edges are the additive terms of the residual-stream
//! update: for each attention sublayer one residual edge plus one edge per
//! (head, source, target) triple, for each MLP sublayer one residual edge
//! plus one MLP edge. Every node state is exactly the sum of its incoming
//! edge vectors (plus the never-masked attention output bias, which is not
//! split across heads). An edge's importance is the L1 norm of its vector;
//! the normalized importance divides by the total incoming L1 mass of the
//! target node.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::compute;
use crate::model::config::ModelConfig;
use crate::model::forward::{Distribution, TokenSequence};
use crate::model::weights::Model;

/// Address of one intermediate token representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    /// h^0: token plus positional embedding.
    Embedding { pos: usize },
    /// State after layer `layer`'s attention sublayer.
    AfterAttention { layer: usize, pos: usize },
    /// State after layer `layer`'s MLP sublayer.
    AfterMlp { layer: usize, pos: usize },
}

/// Address of one additive contribution in the unrolled graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeId {
    /// The carried-over state term of an attention sublayer.
    AttnResidual { layer: usize, pos: usize },
    /// The vector moved from `src` to `tgt` by one attention head.
    Attention {
        layer: usize,
        head: usize,
        src: usize,
        tgt: usize,
    },
    /// The carried-over state term of an MLP sublayer.
    MlpResidual { layer: usize, pos: usize },
    /// The MLP update of one position.
    Mlp { layer: usize, pos: usize },
}

impl EdgeId {
    pub fn is_residual(&self) -> bool {
        matches!(
            self,
            EdgeId::AttnResidual { .. } | EdgeId::MlpResidual { .. }
        )
    }

    pub fn source(&self) -> NodeId {
        match *self {
            EdgeId::AttnResidual { layer, pos } => previous_node(layer, pos),
            EdgeId::Attention { layer, src, .. } => previous_node(layer, src),
            EdgeId::MlpResidual { layer, pos } | EdgeId::Mlp { layer, pos } => {
                NodeId::AfterAttention { layer, pos }
            }
        }
    }

    pub fn target(&self) -> NodeId {
        match *self {
            EdgeId::AttnResidual { layer, pos } => NodeId::AfterAttention { layer, pos },
            EdgeId::Attention { layer, tgt, .. } => NodeId::AfterAttention { layer, pos: tgt },
            EdgeId::MlpResidual { layer, pos } | EdgeId::Mlp { layer, pos } => {
                NodeId::AfterMlp { layer, pos }
            }
        }
    }
}

fn previous_node(layer: usize, pos: usize) -> NodeId {
    if layer == 0 {
        NodeId::Embedding { pos }
    } else {
        NodeId::AfterMlp {
            layer: layer - 1,
            pos,
        }
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            EdgeId::AttnResidual { layer, pos } => write!(f, "ares:{layer}:{pos}"),
            EdgeId::Attention {
                layer,
                head,
                src,
                tgt,
            } => write!(f, "att:{layer}:{head}:{src}:{tgt}"),
            EdgeId::MlpResidual { layer, pos } => write!(f, "mres:{layer}:{pos}"),
            EdgeId::Mlp { layer, pos } => write!(f, "mlp:{layer}:{pos}"),
        }
    }
}

impl FromStr for EdgeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownEdge(s.to_string());
        let mut parts = s.split(':');
        let kind = parts.next().ok_or_else(bad)?;
        let mut nums = Vec::new();
        for p in parts {
            nums.push(p.parse::<usize>().map_err(|_| bad())?);
        }
        match (kind, nums.as_slice()) {
            ("ares", [layer, pos]) => Ok(EdgeId::AttnResidual {
                layer: *layer,
                pos: *pos,
            }),
            ("att", [layer, head, src, tgt]) => Ok(EdgeId::Attention {
                layer: *layer,
                head: *head,
                src: *src,
                tgt: *tgt,
            }),
            ("mres", [layer, pos]) => Ok(EdgeId::MlpResidual {
                layer: *layer,
                pos: *pos,
            }),
            ("mlp", [layer, pos]) => Ok(EdgeId::Mlp {
                layer: *layer,
                pos: *pos,
            }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for EdgeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EdgeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// One edge with its vector and importance scores.
#[derive(Debug, Clone)]
pub struct EdgeRecord {
    pub id: EdgeId,
    pub vector: Array1<f32>,
    pub importance_raw: f64,
    pub importance_norm: f64,
}

struct LayerDecomposition {
    /// Per head `[n, n]` attention weights, zero above the diagonal.
    alphas: Vec<Array2<f32>>,
    /// Per head `[n, d_model]` projected source vectors.
    head_src: Vec<Array2<f32>>,
    /// L1 norms of `head_src` rows.
    head_src_l1: Vec<Vec<f64>>,
    after_attn: Array2<f32>,
    mlp_edge: Array2<f32>,
    after_mlp: Array2<f32>,
    /// Raw importances of the attention-sublayer residual edges (per target).
    res_attn_l1: Vec<f64>,
    /// Total incoming raw importance of each AfterAttention node.
    attn_denom: Vec<f64>,
    /// Raw importances of the MLP-sublayer residual edges (per target).
    res_mlp_l1: Vec<f64>,
    mlp_l1: Vec<f64>,
}

/// One input's cached node states, edge vectors and importances.
///
/// Immutable once built; all queries are read-only.
pub struct DecomposedRun {
    tokens: TokenSequence,
    config: ModelConfig,
    embedding: Array2<f32>,
    layers: Vec<LayerDecomposition>,
    output: Distribution,
    ancestors: HashSet<EdgeId>,
}

fn l1(v: ArrayView1<f32>) -> f64 {
    v.iter().map(|&x| (x as f64).abs()).sum()
}

/// Run the forward pass while materializing every edge of the graph.
///
/// Attention edges carry `alpha * (value(src) @ W_O_head)`, MLP edges carry
/// the full MLP update including its biases, residual edges carry the
/// incoming node state verbatim. The attention output bias is added once per
/// target as an unconditional addend. The reassembled output equals the
/// plain forward pass within TV 1e-4.
pub fn decompose_forward(model: &Model, tokens: &TokenSequence) -> Result<DecomposedRun> {
    tokens.validate_for(&model.config)?;
    let cfg = model.config.clone();
    let n = tokens.len();
    let d = cfg.d_model;

    let embedding = compute::embed(model, tokens.ids());
    let mut h = embedding.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);

    for layer in &model.layers {
        let x1 = compute::layer_norm(h.view(), &layer.ln1, cfg.ln_epsilon);
        let pieces = compute::attention_pieces(layer, &x1, cfg.n_heads, cfg.d_head);
        let head_src = compute::project_sources(layer, &pieces.values, cfg.d_head);
        let head_src_l1: Vec<Vec<f64>> = head_src
            .iter()
            .map(|hs| (0..n).map(|j| l1(hs.row(j))).collect())
            .collect();

        // Node update in canonical order: residual, then heads ascending and
        // sources ascending, then the unconditional output bias.
        let mut after_attn = Array2::<f32>::zeros((n, d));
        let mut res_attn_l1 = Vec::with_capacity(n);
        let mut attn_denom = Vec::with_capacity(n);
        let bo = layer.bo.as_slice().expect("contiguous");
        for i in 0..n {
            let mut row: Vec<f32> = h.row(i).to_vec();
            let mut denom = l1(h.row(i));
            res_attn_l1.push(denom);
            for (alpha, (hs, hs_l1)) in pieces
                .alphas
                .iter()
                .zip(head_src.iter().zip(head_src_l1.iter()))
            {
                for j in 0..=i {
                    let a = alpha[[i, j]];
                    let src = hs.row(j);
                    let src = src.as_slice().expect("contiguous");
                    for (r, &s) in row.iter_mut().zip(src) {
                        *r += a * s;
                    }
                    denom += a as f64 * hs_l1[j];
                }
            }
            for (r, &b) in row.iter_mut().zip(bo) {
                *r += b;
            }
            attn_denom.push(denom);
            after_attn
                .row_mut(i)
                .assign(&ArrayView1::from_shape(d, &row).unwrap());
        }

        let x2 = compute::layer_norm(after_attn.view(), &layer.ln2, cfg.ln_epsilon);
        let mlp_edge = compute::mlp(layer, &x2);
        let after_mlp = &after_attn + &mlp_edge;

        let res_mlp_l1: Vec<f64> = (0..n).map(|i| l1(after_attn.row(i))).collect();
        let mlp_l1: Vec<f64> = (0..n).map(|i| l1(mlp_edge.row(i))).collect();

        h = after_mlp.clone();
        layers.push(LayerDecomposition {
            alphas: pieces.alphas,
            head_src,
            head_src_l1,
            after_attn,
            mlp_edge,
            after_mlp,
            res_attn_l1,
            attn_denom,
            res_mlp_l1,
            mlp_l1,
        });
    }

    let output = Distribution::new(compute::output_probs(model, h.row(n - 1)))?;
    let mut run = DecomposedRun {
        tokens: tokens.clone(),
        config: cfg,
        embedding,
        layers,
        output,
        ancestors: HashSet::new(),
    };
    run.ancestors = run.reachable_edge_set();
    Ok(run)
}

impl DecomposedRun {
    pub fn tokens(&self) -> &TokenSequence {
        &self.tokens
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// The distribution reassembled from the decomposed states.
    pub fn output_distribution(&self) -> &Distribution {
        &self.output
    }

    /// The final output node h^L_n whose ancestry defines the graph.
    pub fn final_output_node(&self) -> NodeId {
        NodeId::AfterMlp {
            layer: self.config.n_layers - 1,
            pos: self.n() - 1,
        }
    }

    pub fn node_state(&self, node: NodeId) -> Result<ArrayView1<'_, f32>> {
        self.check_node(node)?;
        Ok(match node {
            NodeId::Embedding { pos } => self.embedding.row(pos),
            NodeId::AfterAttention { layer, pos } => self.layers[layer].after_attn.row(pos),
            NodeId::AfterMlp { layer, pos } => self.layers[layer].after_mlp.row(pos),
        })
    }

    /// The never-masked addend of a node's update (the attention output bias
    /// for AfterAttention nodes), if any.
    pub fn unconditional_addend<'m>(
        &self,
        node: NodeId,
        model: &'m Model,
    ) -> Option<ArrayView1<'m, f32>> {
        match node {
            NodeId::AfterAttention { layer, .. } => Some(model.layers[layer].bo.view()),
            _ => None,
        }
    }

    fn check_node(&self, node: NodeId) -> Result<()> {
        let (layer, pos) = match node {
            NodeId::Embedding { pos } => (0, pos),
            NodeId::AfterAttention { layer, pos } | NodeId::AfterMlp { layer, pos } => (layer, pos),
        };
        if layer >= self.config.n_layers || pos >= self.n() {
            return Err(Error::UnknownEdge(format!("{node:?}")));
        }
        Ok(())
    }

    fn check_edge(&self, edge: EdgeId) -> Result<()> {
        let bad = || Error::UnknownEdge(edge.to_string());
        match edge {
            EdgeId::AttnResidual { layer, pos }
            | EdgeId::MlpResidual { layer, pos }
            | EdgeId::Mlp { layer, pos } => {
                if layer >= self.config.n_layers || pos >= self.n() {
                    return Err(bad());
                }
            }
            EdgeId::Attention {
                layer,
                head,
                src,
                tgt,
            } => {
                if layer >= self.config.n_layers
                    || head >= self.config.n_heads
                    || tgt >= self.n()
                    || src > tgt
                {
                    return Err(bad());
                }
            }
        }
        Ok(())
    }

    /// Incoming edges of a node in canonical (accumulation) order.
    pub fn incoming_edges(&self, node: NodeId) -> Result<Vec<EdgeId>> {
        self.check_node(node)?;
        Ok(match node {
            NodeId::Embedding { .. } => Vec::new(),
            NodeId::AfterAttention { layer, pos } => {
                let mut edges = Vec::with_capacity(1 + self.config.n_heads * (pos + 1));
                edges.push(EdgeId::AttnResidual { layer, pos });
                for head in 0..self.config.n_heads {
                    for src in 0..=pos {
                        edges.push(EdgeId::Attention {
                            layer,
                            head,
                            src,
                            tgt: pos,
                        });
                    }
                }
                edges
            }
            NodeId::AfterMlp { layer, pos } => vec![
                EdgeId::MlpResidual { layer, pos },
                EdgeId::Mlp { layer, pos },
            ],
        })
    }

    /// Every edge of the graph, layer-major.
    pub fn all_edges(&self) -> impl Iterator<Item = EdgeId> + '_ {
        let n = self.n();
        (0..self.config.n_layers).flat_map(move |layer| {
            let attn = (0..n).flat_map(move |pos| {
                self.incoming_edges(NodeId::AfterAttention { layer, pos })
                    .expect("in range")
            });
            let mlp = (0..n).flat_map(move |pos| {
                self.incoming_edges(NodeId::AfterMlp { layer, pos })
                    .expect("in range")
            });
            attn.chain(mlp)
        })
    }

    pub fn edge_count(&self) -> usize {
        let n = self.n();
        let per_layer: usize = (0..n).map(|i| self.config.n_heads * (i + 1) + 1).sum();
        (per_layer + 2 * n) * self.config.n_layers
    }

    /// The edge's vector: the exact additive term used in the node update.
    pub fn edge_vector(&self, edge: EdgeId) -> Result<Array1<f32>> {
        self.check_edge(edge)?;
        Ok(match edge {
            EdgeId::AttnResidual { layer, pos } => {
                let prev = previous_node(layer, pos);
                self.node_state(prev)?.to_owned()
            }
            EdgeId::Attention {
                layer,
                head,
                src,
                tgt,
            } => {
                let l = &self.layers[layer];
                let a = l.alphas[head][[tgt, src]];
                l.head_src[head].row(src).mapv(|x| a * x)
            }
            EdgeId::MlpResidual { layer, pos } => self.layers[layer].after_attn.row(pos).to_owned(),
            EdgeId::Mlp { layer, pos } => self.layers[layer].mlp_edge.row(pos).to_owned(),
        })
    }

    /// The L1 norm of the edge vector.
    pub fn importance_raw(&self, edge: EdgeId) -> Result<f64> {
        self.check_edge(edge)?;
        Ok(match edge {
            EdgeId::AttnResidual { layer, pos } => self.layers[layer].res_attn_l1[pos],
            EdgeId::Attention {
                layer,
                head,
                src,
                tgt,
            } => {
                let l = &self.layers[layer];
                l.alphas[head][[tgt, src]] as f64 * l.head_src_l1[head][src]
            }
            EdgeId::MlpResidual { layer, pos } => self.layers[layer].res_mlp_l1[pos],
            EdgeId::Mlp { layer, pos } => self.layers[layer].mlp_l1[pos],
        })
    }

    /// Raw importance divided by the total incoming raw importance of the
    /// edge's target node; 0 when the denominator is 0.
    pub fn normalized_importance(&self, edge: EdgeId) -> Result<f64> {
        let raw = self.importance_raw(edge)?;
        let denom = match edge.target() {
            NodeId::AfterAttention { layer, pos } => self.layers[layer].attn_denom[pos],
            NodeId::AfterMlp { layer, pos } => {
                let l = &self.layers[layer];
                l.res_mlp_l1[pos] + l.mlp_l1[pos]
            }
            NodeId::Embedding { .. } => unreachable!("edges never target embeddings"),
        };
        if denom == 0.0 {
            Ok(0.0)
        } else {
            Ok(raw / denom)
        }
    }

    pub fn edge_record(&self, edge: EdgeId) -> Result<EdgeRecord> {
        Ok(EdgeRecord {
            id: edge,
            vector: self.edge_vector(edge)?,
            importance_raw: self.importance_raw(edge)?,
            importance_norm: self.normalized_importance(edge)?,
        })
    }

    /// Edges lying on some directed path to the final output node. This set
    /// is the denominator of all trace size ratios.
    pub fn ancestor_edges(&self) -> &HashSet<EdgeId> {
        &self.ancestors
    }

    pub fn ancestor_count(&self) -> usize {
        self.ancestors.len()
    }

    /// Residual edges within the ancestor set.
    pub fn residual_ancestors(&self) -> impl Iterator<Item = EdgeId> + '_ {
        self.ancestors.iter().copied().filter(EdgeId::is_residual)
    }

    fn reachable_edge_set(&self) -> HashSet<EdgeId> {
        let mut edges = HashSet::new();
        let mut visited = HashSet::new();
        let mut stack = vec![self.final_output_node()];
        visited.insert(self.final_output_node());
        while let Some(node) = stack.pop() {
            for edge in self.incoming_edges(node).expect("in range") {
                edges.insert(edge);
                let src = edge.source();
                if visited.insert(src) {
                    stack.push(src);
                }
            }
        }
        edges
    }

    /// Debug dump: one JSON record per edge with its importances.
    pub fn write_edge_dump(&self, mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            id: EdgeId,
            importance_raw: f64,
            importance_norm: f64,
        }
        for id in self.all_edges() {
            let row = Row {
                id,
                importance_raw: self.importance_raw(id)?,
                importance_norm: self.normalized_importance(id)?,
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
