//! Distributional faithfulness metrics: total variation distance, entropy
//! and the nucleus reconstruction score.

use crate::error::{Error, Result};
use crate::model::forward::Distribution;

/// Total variation distance: half the L1 distance between the probability
/// vectors. Bounded in [0, 1]; a metric on the simplex.
pub fn tv_distance(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::VocabMismatch(p.vocab_size(), q.vocab_size()));
    }
    let sum: f64 = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&a, &b)| ((a as f64) - (b as f64)).abs())
        .sum();
    Ok(sum / 2.0)
}

/// Shannon entropy in nats, with 0 * log 0 = 0.
pub fn entropy(p: &Distribution) -> f64 {
    p.probs()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let x = x as f64;
            -x * x.ln()
        })
        .sum()
}

/// The largest q in 0..=100 such that the smallest token set covering the
/// top q% of `p_g`'s probability mass (ties broken by token index) is
/// reconstructed by `p_t`: the set's masses agree within `mass_tolerance`
/// and so does every member token's probability. The check is prefix-closed:
/// the returned q is the last one before the first failure.
pub fn nucleus_reconstruction(
    p_g: &Distribution,
    p_t: &Distribution,
    mass_tolerance: f64,
) -> Result<u32> {
    if p_g.vocab_size() != p_t.vocab_size() {
        return Err(Error::VocabMismatch(p_g.vocab_size(), p_t.vocab_size()));
    }
    let g = p_g.probs();
    let t = p_t.probs();
    let mut order: Vec<u32> = (0..g.len() as u32).collect();
    order.sort_by(|&a, &b| {
        g[b as usize]
            .partial_cmp(&g[a as usize])
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });

    let mut next = 0usize; // next token to add to the growing nucleus
    let mut mass_g = 0.0f64;
    let mut mass_t = 0.0f64;
    let mut worst_token_dev = 0.0f64;
    for q in 1..=100u32 {
        let needed = q as f64 / 100.0;
        while mass_g < needed && next < order.len() {
            let idx = order[next] as usize;
            mass_g += g[idx] as f64;
            mass_t += t[idx] as f64;
            worst_token_dev = worst_token_dev.max(((g[idx] as f64) - (t[idx] as f64)).abs());
            next += 1;
        }
        let set_ok = (mass_g - mass_t).abs() <= mass_tolerance;
        let tokens_ok = worst_token_dev <= mass_tolerance;
        if !(set_ok && tokens_ok) {
            return Ok(q - 1);
        }
    }
    Ok(100)
}
