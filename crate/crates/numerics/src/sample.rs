//! Top-k sampling over (possibly masked) logits.

use rand::Rng;

use crate::{Error, Result};

/// Samples an index from the `k` largest finite logits after dividing by
/// `temperature`. Masked positions carry `-inf` and are never chosen.
/// With `k == 1` the argmax is returned without consuming randomness;
/// ties resolve to the lower index.
pub fn topk_sample<R: Rng + ?Sized>(logits: &[f32], k: usize, temperature: f32, rng: &mut R) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("top-k requires k >= 1".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be > 0")));
    }
    let mut candidates: Vec<usize> = (0..logits.len()).filter(|&i| logits[i].is_finite()).collect();
    if candidates.is_empty() {
        return Err(Error::EmptyDecodingSpace);
    }
    candidates.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    candidates.truncate(k);
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let max = logits[candidates[0]];
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&i| (((logits[i] - max) / temperature) as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in candidates.iter().zip(&weights) {
        if u < w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(*candidates.last().expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k_one_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(topk_sample(&[0.1, 3.0, 0.2], 1, 1.0, &mut rng).unwrap(), 1);
    }

    #[test]
    fn fully_masked_logits_are_an_empty_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = topk_sample(&[f32::NEG_INFINITY; 4], 5, 1.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::EmptyDecodingSpace));
    }

    #[test]
    fn dominant_logit_wins_almost_always() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut logits = vec![0.0f32; 10];
        logits[3] = 1e9;
        let hits = (0..10_000)
            .filter(|_| topk_sample(&logits, 5, 1.0, &mut rng).unwrap() == 3)
            .count();
        assert!(hits as f64 / 1e4 > 0.999);
    }

    #[test]
    fn smallest_logit_is_never_drawn_with_k_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = [0.5f32, -0.3, 0.4];
        for _ in 0..10_000 {
            assert_ne!(topk_sample(&logits, 2, 1.0, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn masked_entries_never_drawn() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = [f32::NEG_INFINITY, 1.0, f32::NEG_INFINITY, 1.0];
        for _ in 0..1000 {
            let i = topk_sample(&logits, 5, 1.0, &mut rng).unwrap();
            assert!(i == 1 || i == 3);
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let logits = [0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6];
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| topk_sample(&logits, 5, 1.0, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
    }
}
