//! Correlation statistics and permutation tests for the density analyses.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Word frequency lookup table (case-folded), loaded from a
/// `word<TAB>count` TSV file.
#[derive(Debug, Clone, Default)]
pub struct FrequencyTable {
    counts: HashMap<String, u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut table = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::ParseError { line: i + 1, msg };
            let (word, count) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(format!("expected `word<TAB>count`, got `{line}`")))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad count `{count}`")))?;
            if count == 0 {
                return Err(parse_err("counts must be >= 1".into()));
            }
            table.insert(word, count);
        }
        Ok(table)
    }

    pub fn insert(&mut self, word: &str, count: u64) {
        *self.counts.entry(word.to_lowercase()).or_insert(0) += count;
        self.total += count;
    }

    /// Corpus count of a word; unknown words resolve to 0.
    pub fn count(&self, word: &str) -> u64 {
        self.counts.get(&word.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

fn check_paired(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: xs.len(),
        });
    }
    Ok(())
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_paired(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateVariance("xs"));
    }
    if syy == 0.0 {
        return Err(Error::DegenerateVariance("ys"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Fractional ranks (1-based), ties receiving the average of their ranks.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson on fractional ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_paired(xs, ys)?;
    pearson(&fractional_ranks(xs), &fractional_ranks(ys))
}

/// Which correlation a permutation test permutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    Pearson,
    Spearman,
}

impl CorrelationKind {
    pub fn compute(self, xs: &[f64], ys: &[f64]) -> Result<f64> {
        match self {
            CorrelationKind::Pearson => pearson(xs, ys),
            CorrelationKind::Spearman => spearman(xs, ys),
        }
    }
}

/// Two-sided permutation p-value for a correlation: the fraction of label
/// shuffles whose |correlation| reaches the observed one, with the add-one
/// correction. Deterministic given the seed.
pub fn permutation_p_value(
    xs: &[f64],
    ys: &[f64],
    kind: CorrelationKind,
    n_shuffles: usize,
    seed: u64,
) -> Result<f64> {
    let observed = kind.compute(xs, ys)?.abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = ys.to_vec();
    let mut hits = 0usize;
    for _ in 0..n_shuffles {
        shuffled.shuffle(&mut rng);
        let stat = kind.compute(xs, &shuffled)?.abs();
        if stat >= observed {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (n_shuffles + 1) as f64)
}

/// One row of the density feature report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub metric: String,
    pub n: usize,
    pub estimate: f64,
    pub p_value: f64,
    pub seed: u64,
}

pub fn correlation_report(
    metric: &str,
    xs: &[f64],
    ys: &[f64],
    kind: CorrelationKind,
    n_shuffles: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    Ok(CorrelationReport {
        metric: metric.to_string(),
        n: xs.len(),
        estimate: kind.compute(xs, ys)?,
        p_value: permutation_p_value(xs, ys, kind, n_shuffles, seed)?,
        seed,
    })
}

/// Default shuffle count of the density feature report.
pub const DEFAULT_SHUFFLES: usize = 10_000;

/// The statistical relationships that drive density: rank correlation of
/// word density with log frequency and with position, and the linear
/// correlation of token density with output entropy, each with a seeded
/// permutation p-value.
pub fn density_feature_report(
    words: &[crate::density::WordRecord],
    tokens: &[crate::density::TokenDensityRecord],
    n_shuffles: usize,
    seed: u64,
) -> Result<Vec<CorrelationReport>> {
    let rho_w: Vec<f64> = words.iter().map(|w| w.max_rho).collect();
    let log_freq: Vec<f64> = words
        .iter()
        .map(|w| (1.0 + w.frequency_count as f64).ln())
        .collect();
    let positions: Vec<f64> = words
        .iter()
        .map(|w| w.first_token_position as f64)
        .collect();
    let rho_t: Vec<f64> = tokens.iter().map(|t| t.rho_hat).collect();
    let entropies: Vec<f64> = tokens.iter().map(|t| t.entropy).collect();

    Ok(vec![
        correlation_report(
            "spearman_density_vs_log_frequency",
            &rho_w,
            &log_freq,
            CorrelationKind::Spearman,
            n_shuffles,
            seed,
        )?,
        correlation_report(
            "spearman_density_vs_position",
            &rho_w,
            &positions,
            CorrelationKind::Spearman,
            n_shuffles,
            seed.wrapping_add(1),
        )?,
        correlation_report(
            "pearson_density_vs_entropy",
            &rho_t,
            &entropies,
            CorrelationKind::Pearson,
            n_shuffles,
            seed.wrapping_add(2),
        )?,
    ])
}
