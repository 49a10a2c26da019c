//! Nucleus sampling and autoregressive generation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::forward::{forward_dense, Distribution, TokenSequence};
use crate::model::weights::Model;

/// Sample from the smallest top-probability set whose cumulative mass
/// reaches `p`, renormalized. Ties in probability break by token index.
pub fn nucleus_sample(dist: &Distribution, p: f64, rng: &mut impl Rng) -> Result<u32> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidP(p));
    }
    let probs = dist.probs();
    let mut order: Vec<u32> = (0..probs.len() as u32).collect();
    order.sort_by(|&a, &b| {
        probs[b as usize]
            .partial_cmp(&probs[a as usize])
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });

    let mut nucleus_mass = 0.0f64;
    let mut cut = order.len();
    for (rank, &idx) in order.iter().enumerate() {
        nucleus_mass += probs[idx as usize] as f64;
        if nucleus_mass >= p {
            cut = rank + 1;
            break;
        }
    }

    let u = rng.random::<f64>() * nucleus_mass;
    let mut acc = 0.0f64;
    for &idx in &order[..cut] {
        acc += probs[idx as usize] as f64;
        if u < acc {
            return Ok(idx);
        }
    }
    Ok(order[cut - 1])
}

/// Append `n_new` nucleus-sampled tokens to the prompt. A pure function of
/// `(model, prompt, p, seed)`.
pub fn generate(
    model: &Model,
    prompt: &TokenSequence,
    n_new: usize,
    p: f64,
    seed: u64,
) -> Result<TokenSequence> {
    let total = prompt.len() + n_new;
    if total > model.config.max_seq_len {
        return Err(Error::InputTooLong {
            n: total,
            max: model.config.max_seq_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = prompt.clone();
    for _ in 0..n_new {
        let dist = forward_dense(model, &tokens)?;
        let next = nucleus_sample(&dist, p, &mut rng)?;
        tokens = tokens.extended(next);
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(probs: Vec<f32>) -> Distribution {
        Distribution::new(probs).unwrap()
    }

    #[test]
    fn invalid_p_rejected() {
        let d = dist(vec![1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            nucleus_sample(&d, 0.0, &mut rng),
            Err(Error::InvalidP(_))
        ));
        assert!(matches!(
            nucleus_sample(&d, 1.5, &mut rng),
            Err(Error::InvalidP(_))
        ));
    }

    #[test]
    fn one_hot_always_sampled() {
        let d = dist(vec![0.0, 1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert_eq!(nucleus_sample(&d, 0.3, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn nucleus_restricts_support() {
        // 0.5 < 0.6 <= 0.8, so the nucleus is {0, 1}.
        let d = dist(vec![0.5, 0.3, 0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let t = nucleus_sample(&d, 0.6, &mut rng).unwrap();
            assert!(t == 0 || t == 1, "sampled outside the nucleus: {t}");
        }
    }

    #[test]
    fn full_p_matches_multinomial_frequencies() {
        let probs = vec![0.45f32, 0.3, 0.15, 0.07, 0.03];
        let d = dist(probs.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000usize;
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..n {
            counts[nucleus_sample(&d, 1.0, &mut rng).unwrap() as usize] += 1;
        }
        for (i, &q) in probs.iter().enumerate() {
            let q = q as f64;
            let sigma = (q * (1.0 - q) / n as f64).sqrt();
            let freq = counts[i] as f64 / n as f64;
            assert!(
                (freq - q).abs() <= 3.0 * sigma,
                "token {i}: freq {freq} vs prob {q} (3 sigma = {})",
                3.0 * sigma
            );
        }
    }
}
