//! Density estimation: the threshold sweep, the trapezoidal area under the
//! size/error curve, per-token generation profiling and word aggregation.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{decompose_forward, DecomposedRun};
use crate::masked::run_masked;
use crate::metrics::{entropy, nucleus_reconstruction, tv_distance};
use crate::model::forward::{forward_dense, Distribution, TokenSequence};
use crate::model::sample::generate;
use crate::model::tokenizer::Tokenizer;
use crate::model::weights::Model;
use crate::stats::FrequencyTable;
use crate::trace::{extract_trace, full_trace, ThresholdGrid};

/// Default mass tolerance of the nucleus reconstruction score.
pub const DEFAULT_MASS_TOLERANCE: f64 = 0.01;

/// One evaluated threshold: trace size, its TV error against the full model
/// and its nucleus reconstruction score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub size: f64,
    pub tv_error: f64,
    pub nucleus: u32,
}

/// The integrated size/error curve: its (size, error) support points after
/// sorting, deduplication and anchoring, and the trapezoidal area.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub points: Vec<(f64, f64)>,
    pub rho_hat: f64,
    pub added_zero_anchor: bool,
    pub added_one_anchor: bool,
}

/// Trapezoidal area under the (size, error) curve.
///
/// Points are sorted by size; equal sizes are deduplicated keeping the
/// smaller error. A missing s=0 endpoint is anchored at error 1 (the
/// conservative bound for an empty trace, whose output is degenerate); a
/// missing s=1 endpoint extends the last measured error (the full pipeline
/// always supplies a measured one).
pub fn auc_trapezoid(points: &[(f64, f64)]) -> DensityEstimate {
    assert!(!points.is_empty(), "need at least one sweep point");
    let mut sorted: Vec<(f64, f64)> = points.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    let mut dedup: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for (s, e) in sorted {
        match dedup.last_mut() {
            Some((s_prev, e_prev)) if *s_prev == s => *e_prev = e_prev.min(e),
            _ => dedup.push((s, e)),
        }
    }
    let added_zero_anchor = dedup[0].0 > 0.0;
    if added_zero_anchor {
        dedup.insert(0, (0.0, 1.0));
    }
    let added_one_anchor = dedup.last().expect("non-empty").0 < 1.0;
    if added_one_anchor {
        let last_err = dedup.last().expect("non-empty").1;
        dedup.push((1.0, last_err));
    }
    let mut rho_hat = 0.0;
    for w in dedup.windows(2) {
        let (s0, e0) = w[0];
        let (s1, e1) = w[1];
        rho_hat += 0.5 * (s1 - s0) * (e0 + e1);
    }
    DensityEstimate {
        points: dedup,
        rho_hat,
        added_zero_anchor,
        added_one_anchor,
    }
}

/// Evaluate every threshold of the grid against an existing decomposition:
/// extract the trace, re-run the model under its mask and score the result.
pub fn sweep_run(
    model: &Model,
    run: &DecomposedRun,
    p_g: &Distribution,
    grid: &ThresholdGrid,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(grid.taus().len());
    for &tau in grid.taus() {
        let trace = extract_trace(run, tau)?;
        let p_t = run_masked(model, run.tokens(), &trace)?;
        points.push(SweepPoint {
            tau,
            size: trace.size_ratio,
            tv_error: tv_distance(p_g, &p_t)?,
            nucleus: nucleus_reconstruction(p_g, &p_t, DEFAULT_MASS_TOLERANCE)?,
        });
    }
    Ok(points)
}

/// Decompose the input and evaluate the threshold grid.
pub fn sweep(model: &Model, tokens: &TokenSequence, grid: &ThresholdGrid) -> Result<Vec<SweepPoint>> {
    let p_g = forward_dense(model, tokens)?;
    let run = decompose_forward(model, tokens)?;
    sweep_run(model, &run, &p_g, grid)
}

/// Integrate sweep points into the density estimate. The s=1 endpoint is
/// always measured: when the sweep's largest trace does not reach the full
/// ancestor set, the full trace is evaluated and appended.
pub fn density_from_run(
    model: &Model,
    run: &DecomposedRun,
    p_g: &Distribution,
    points: &[SweepPoint],
) -> Result<DensityEstimate> {
    let mut support: Vec<(f64, f64)> = points.iter().map(|p| (p.size, p.tv_error)).collect();
    if !support.iter().any(|&(s, _)| s >= 1.0) {
        let p_full = run_masked(model, run.tokens(), &full_trace(run))?;
        support.push((1.0, tv_distance(p_g, &p_full)?));
    }
    Ok(auc_trapezoid(&support))
}

/// Sweep the grid and integrate: the per-input computation density.
pub fn estimate_density(
    model: &Model,
    tokens: &TokenSequence,
    grid: &ThresholdGrid,
) -> Result<(Vec<SweepPoint>, DensityEstimate)> {
    let p_g = forward_dense(model, tokens)?;
    let run = decompose_forward(model, tokens)?;
    let points = sweep_run(model, &run, &p_g, grid)?;
    let estimate = density_from_run(model, &run, &p_g, &points)?;
    Ok((points, estimate))
}

/// Density and context of one token of a profiled text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenDensityRecord {
    /// Index in the full token sequence (prompt + generation).
    pub position: usize,
    pub token_id: u32,
    pub token_text: String,
    pub rho_hat: f64,
    /// Entropy of the full model's distribution that predicted this token.
    pub entropy: f64,
    pub is_generated: bool,
}

/// Records for the prompt tokens themselves (no density attached); useful as
/// rendering context ahead of the generated records.
pub fn prompt_records(tokenizer: &Tokenizer, prompt: &TokenSequence) -> Result<Vec<TokenDensityRecord>> {
    prompt
        .ids()
        .iter()
        .enumerate()
        .map(|(position, &token_id)| {
            Ok(TokenDensityRecord {
                position,
                token_id,
                token_text: tokenizer.token_text(token_id)?,
                rho_hat: 0.0,
                entropy: 0.0,
                is_generated: false,
            })
        })
        .collect()
}

/// Generate a continuation and profile the density of every generated token:
/// for each position, the trace sweep runs on the prefix ending just before
/// it, so the score describes the computation that produced that prediction.
pub fn profile_generation(
    model: &Model,
    tokenizer: &Tokenizer,
    prompt_text: &str,
    n_new: usize,
    p: f64,
    seed: u64,
    grid: &ThresholdGrid,
) -> Result<Vec<TokenDensityRecord>> {
    let prompt = TokenSequence::new(tokenizer.encode(prompt_text)?)?;
    prompt.validate_for(&model.config)?;
    let full = generate(model, &prompt, n_new, p, seed)?;
    let mut records = Vec::with_capacity(n_new);
    for pos in prompt.len()..full.len() {
        let prefix = TokenSequence::new(full.ids()[..pos].to_vec())?;
        let p_g = forward_dense(model, &prefix)?;
        let run = decompose_forward(model, &prefix)?;
        let points = sweep_run(model, &run, &p_g, grid)?;
        let estimate = density_from_run(model, &run, &p_g, &points)?;
        let token_id = full.ids()[pos];
        records.push(TokenDensityRecord {
            position: pos,
            token_id,
            token_text: tokenizer.token_text(token_id)?,
            rho_hat: estimate.rho_hat,
            entropy: entropy(&p_g),
            is_generated: true,
        });
    }
    Ok(records)
}

/// A word-level aggregate over contiguous token records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordRecord {
    pub word: String,
    pub word_index: usize,
    /// Maximum density among the word's constituent tokens.
    pub max_rho: f64,
    pub frequency_count: u64,
    pub first_token_position: usize,
    pub last_token_position: usize,
}

/// Group subword token records into word units and max-aggregate density.
///
/// Segmentation rule: split on Unicode whitespace; every maximal run of
/// alphanumeric characters (apostrophes between alphanumerics included) is a
/// word; every other maximal run of non-space characters is its own
/// punctuation unit. Frequencies come from the table (case-folded), 0 when
/// absent.
pub fn aggregate_words(
    records: &[TokenDensityRecord],
    freq: Option<&FrequencyTable>,
) -> Vec<WordRecord> {
    // Byte span of each record in the concatenated text.
    let mut text = String::new();
    let mut spans = Vec::with_capacity(records.len());
    for r in records {
        let start = text.len();
        text.push_str(&r.token_text);
        spans.push((start, text.len()));
    }

    let units = segment_units(&text);
    let mut out = Vec::with_capacity(units.len());
    for (word_index, (start, end)) in units.into_iter().enumerate() {
        let covering: Vec<&TokenDensityRecord> = records
            .iter()
            .zip(&spans)
            .filter(|(_, &(s, e))| s < end && e > start)
            .map(|(r, _)| r)
            .collect();
        if covering.is_empty() {
            continue;
        }
        let word = text[start..end].to_string();
        out.push(WordRecord {
            frequency_count: freq.map_or(0, |f| f.count(&word)),
            word,
            word_index,
            max_rho: covering.iter().map(|r| r.rho_hat).fold(f64::MIN, f64::max),
            first_token_position: covering.iter().map(|r| r.position).min().expect("non-empty"),
            last_token_position: covering.iter().map(|r| r.position).max().expect("non-empty"),
        });
    }
    out
}

/// Byte spans of word and punctuation units in `text`.
fn segment_units(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let end_of = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let is_word_char = |i: usize| {
        let c = chars[i].1;
        if c.is_alphanumeric() {
            return true;
        }
        // Apostrophe inside a word ("don't").
        (c == '\'' || c == '\u{2019}')
            && i > 0
            && i + 1 < n
            && chars[i - 1].1.is_alphanumeric()
            && chars[i + 1].1.is_alphanumeric()
    };
    let mut units = Vec::new();
    let mut i = 0;
    while i < n {
        if chars[i].1.is_whitespace() {
            i += 1;
        } else if is_word_char(i) {
            let start = chars[i].0;
            while i < n && is_word_char(i) {
                i += 1;
            }
            units.push((start, end_of(i)));
        } else {
            let start = chars[i].0;
            while i < n && !chars[i].1.is_whitespace() && !is_word_char(i) {
                i += 1;
            }
            units.push((start, end_of(i)));
        }
    }
    units
}
