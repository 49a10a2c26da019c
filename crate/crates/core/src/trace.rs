//! Trace construction: thresholded recursive backward traversal plus the
//! random and complement baselines.

use std::collections::{HashMap, HashSet};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DecomposedRun, EdgeId, NodeId};

/// How a trace was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceOrigin {
    Thresholded,
    Random,
    Complement,
    Full,
    Empty,
}

/// A binary edge mask over the ancestor set, with its size ratio
/// s = |kept| / |ancestors|.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace {
    pub origin: TraceOrigin,
    pub tau: Option<f64>,
    pub size_ratio: f64,
    #[serde(with = "sorted_edges")]
    pub kept: HashSet<EdgeId>,
}

mod sorted_edges {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: serde::Serializer>(
        set: &HashSet<EdgeId>,
        ser: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let mut edges: Vec<&EdgeId> = set.iter().collect();
        edges.sort();
        let mut seq = ser.serialize_seq(Some(edges.len()))?;
        for e in edges {
            seq.serialize_element(e)?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(
        de: D,
    ) -> std::result::Result<HashSet<EdgeId>, D::Error> {
        let edges: Vec<EdgeId> = Vec::deserialize(de)?;
        Ok(edges.into_iter().collect())
    }
}

impl Trace {
    fn new(origin: TraceOrigin, tau: Option<f64>, kept: HashSet<EdgeId>, total: usize) -> Self {
        let size_ratio = kept.len() as f64 / total as f64;
        Self {
            origin,
            tau,
            size_ratio,
            kept,
        }
    }
}

/// The sequence of importance thresholds swept during density estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdGrid {
    taus: Vec<f64>,
}

/// The default 15-threshold grid, spanning sparse to dense traces.
pub const DEFAULT_GRID: [f64; 15] = [
    1e-7, 1e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 0.1, 0.2, 0.4, 0.8, 1.0,
];

impl ThresholdGrid {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::InvalidThreshold(f64::NAN));
        }
        for pair in taus.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidThreshold(pair[1]));
            }
        }
        for &t in &taus {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidThreshold(t));
            }
        }
        Ok(Self { taus })
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            taus: DEFAULT_GRID.to_vec(),
        }
    }
}

impl FromStr for ThresholdGrid {
    type Err = Error;

    /// `"default"` or a comma-separated list of thresholds.
    fn from_str(s: &str) -> Result<Self> {
        if s == "default" {
            return Ok(Self::default());
        }
        let taus = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidThreshold(f64::NAN))
            })
            .collect::<Result<Vec<f64>>>()?;
        Self::new(taus)
    }
}

/// Recursive backward search from the final output node, admitting each
/// incoming edge whose normalized importance reaches `tau` and expanding its
/// source node. `tau = 0` reproduces the full ancestor set.
pub fn extract_trace(run: &DecomposedRun, tau: f64) -> Result<Trace> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidThreshold(tau));
    }
    let mut kept = HashSet::new();
    let mut visited = HashSet::new();
    let mut stack = vec![run.final_output_node()];
    visited.insert(run.final_output_node());
    while let Some(node) = stack.pop() {
        for edge in run.incoming_edges(node)? {
            if run.normalized_importance(edge)? >= tau {
                kept.insert(edge);
                let src = edge.source();
                if visited.insert(src) {
                    stack.push(src);
                }
            }
        }
    }
    Ok(Trace::new(
        TraceOrigin::Thresholded,
        Some(tau),
        kept,
        run.ancestor_count(),
    ))
}

/// The whole ancestor set as a trace (the no-op mask).
pub fn full_trace(run: &DecomposedRun) -> Trace {
    Trace::new(
        TraceOrigin::Full,
        None,
        run.ancestor_edges().clone(),
        run.ancestor_count(),
    )
}

/// A trace with no edges at all.
pub fn empty_trace(run: &DecomposedRun) -> Trace {
    Trace::new(
        TraceOrigin::Empty,
        None,
        HashSet::new(),
        run.ancestor_count(),
    )
}

/// A size-matched random baseline trace: all residual ancestor edges are
/// included unconditionally, then edges are drawn uniformly from the frontier
/// of the already-connected part until `target_size` of the ancestor set is
/// reached. Connectivity of the drawn edges holds by construction.
pub fn random_trace(
    run: &DecomposedRun,
    target_size: f64,
    rng: &mut impl Rng,
) -> Result<Trace> {
    let total = run.ancestor_count();
    let mut residuals: Vec<EdgeId> = run.residual_ancestors().collect();
    residuals.sort();
    let floor = residuals.len() as f64 / total as f64;
    if target_size < floor {
        return Err(Error::SizeInfeasible {
            requested: target_size,
            floor,
        });
    }
    if target_size > 1.0 {
        return Err(Error::SizeInfeasible {
            requested: target_size,
            floor,
        });
    }
    let target_count = ((target_size * total as f64).ceil() as usize)
        .max(residuals.len())
        .min(total);

    let mut kept: HashSet<EdgeId> = residuals.into_iter().collect();
    let mut reached: HashSet<NodeId> = HashSet::new();
    let mut frontier: Vec<EdgeId> = Vec::new();

    // Mark `node` as having a kept path to the output: kept in-edges extend
    // the reachable region, unkept in-edges become sampling candidates.
    fn join(
        run: &DecomposedRun,
        node: NodeId,
        kept: &HashSet<EdgeId>,
        reached: &mut HashSet<NodeId>,
        frontier: &mut Vec<EdgeId>,
    ) {
        let mut stack = vec![node];
        if !reached.insert(node) {
            return;
        }
        while let Some(node) = stack.pop() {
            for edge in run.incoming_edges(node).expect("in range") {
                if kept.contains(&edge) {
                    let src = edge.source();
                    if reached.insert(src) {
                        stack.push(src);
                    }
                } else if run.ancestor_edges().contains(&edge) {
                    frontier.push(edge);
                }
            }
        }
    }

    join(run, run.final_output_node(), &kept, &mut reached, &mut frontier);
    while kept.len() < target_count && !frontier.is_empty() {
        let at = rng.random_range(0..frontier.len());
        let edge = frontier.swap_remove(at);
        kept.insert(edge);
        join(run, edge.source(), &kept, &mut reached, &mut frontier);
    }
    Ok(Trace::new(TraceOrigin::Random, None, kept, total))
}

/// The edges zero-ablated by the necessity evaluation: the trace's kept set
/// minus all residual edges, which are never ablated.
pub fn complement_for_necessity(trace: &Trace) -> HashSet<EdgeId> {
    trace
        .kept
        .iter()
        .copied()
        .filter(|e| !e.is_residual())
        .collect()
}

/// Uniform random sample of `count` non-residual ancestor edges, the control
/// set of the necessity evaluation.
pub fn random_nonresidual_set(
    run: &DecomposedRun,
    count: usize,
    rng: &mut impl Rng,
) -> Result<HashSet<EdgeId>> {
    let mut pool: Vec<EdgeId> = run
        .ancestor_edges()
        .iter()
        .copied()
        .filter(|e| !e.is_residual())
        .collect();
    pool.sort();
    if count > pool.len() {
        return Err(Error::SizeInfeasible {
            requested: count as f64,
            floor: pool.len() as f64,
        });
    }
    for i in 0..count {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(count);
    Ok(pool.into_iter().collect())
}

/// Check that every kept edge (ignoring the exempted set) lies on a kept
/// path to the output node.
pub fn connected_to_output(run: &DecomposedRun, trace: &Trace, exempt_residuals: bool) -> bool {
    // Reverse reachability over kept edges, starting at the output.
    let mut reachable: HashSet<NodeId> = HashSet::new();
    let mut by_target: HashMap<NodeId, Vec<EdgeId>> = HashMap::new();
    for &e in &trace.kept {
        by_target.entry(e.target()).or_default().push(e);
    }
    let mut stack = vec![run.final_output_node()];
    reachable.insert(run.final_output_node());
    while let Some(node) = stack.pop() {
        if let Some(edges) = by_target.get(&node) {
            for e in edges {
                let src = e.source();
                if reachable.insert(src) {
                    stack.push(src);
                }
            }
        }
    }
    trace
        .kept
        .iter()
        .filter(|e| !(exempt_residuals && e.is_residual()))
        .all(|e| reachable.contains(&e.target()))
}
