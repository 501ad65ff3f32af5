//! Top-k / top-p (nucleus) filtering of a next-token distribution.

use rand::Rng;

/// Candidate tokens allowed at one decoding step: the `top_k` most probable
/// tokens intersected with the smallest prefix of the descending distribution
/// whose mass reaches `top_p`. Returns `(index, probability)` pairs sorted by
/// probability, ties by index. Probabilities are not renormalized.
///
/// Zero-probability tokens are never candidates. With `top_p >= 1` the nucleus
/// keeps every positive token.
pub fn candidate_set(probs: &[f64], top_k: usize, top_p: f64) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = probs
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, p)| *p > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let total: f64 = ranked.iter().map(|(_, p)| p).sum();
    let nucleus_len = if top_p >= 1.0 {
        ranked.len()
    } else {
        let threshold = top_p * total;
        let mut cumulative = 0.0;
        let mut len = ranked.len();
        for (i, (_, p)) in ranked.iter().enumerate() {
            cumulative += p;
            if cumulative >= threshold {
                len = i + 1;
                break;
            }
        }
        len
    };
    ranked.truncate(nucleus_len.min(top_k));
    ranked
}

/// Draws one token index from the renormalized candidate set.
pub fn sample_from<R: Rng + ?Sized>(candidates: &[(usize, f64)], rng: &mut R) -> Option<usize> {
    let total: f64 = candidates.iter().map(|(_, p)| p).sum();
    if candidates.is_empty() || total <= 0.0 {
        return None;
    }
    let mut draw = rng.gen::<f64>() * total;
    for &(idx, p) in candidates {
        if draw < p {
            return Some(idx);
        }
        draw -= p;
    }
    candidates.last().map(|(idx, _)| *idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top_p_one_only_applies_top_k() {
        let probs = [0.1, 0.4, 0.2, 0.3];
        let c = candidate_set(&probs, 3, 1.0);
        assert_eq!(c.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 3, 2]);
        assert_eq!(candidate_set(&probs, 40, 1.0).len(), 4);
    }

    #[test]
    fn nucleus_is_minimal() {
        let probs = [0.5, 0.3, 0.15, 0.05];
        let ids = |p| candidate_set(&probs, 10, p).into_iter().map(|x| x.0).collect::<Vec<_>>();
        assert_eq!(ids(0.5), vec![0]);
        assert_eq!(ids(0.6), vec![0, 1]);
        assert_eq!(ids(0.8), vec![0, 1]);
        assert_eq!(ids(0.81), vec![0, 1, 2]);
    }

    #[test]
    fn zero_mass_tokens_are_excluded() {
        let c = candidate_set(&[0.0, 1.0, 0.0], 3, 1.0);
        assert_eq!(c, vec![(1, 1.0)]);
    }

    #[test]
    fn sampling_respects_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = candidate_set(&[0.25, 0.25, 0.5], 2, 1.0);
        for _ in 0..200 {
            let idx = sample_from(&c, &mut rng).unwrap();
            assert!(idx == 2 || idx == 0);
        }
        assert_eq!(sample_from(&[], &mut rng), None);
    }

    proptest! {
        #[test]
        fn shrinking_top_p_never_grows_the_set(
            raw in proptest::collection::vec(0.0f64..1.0, 1..30),
            k in 1usize..40,
            p_hi in 0.01f64..=1.0,
            shrink in 0.0f64..1.0,
        ) {
            let p_lo = (p_hi * shrink).max(1e-6);
            let wide: Vec<usize> = candidate_set(&raw, k, p_hi).into_iter().map(|x| x.0).collect();
            let narrow: Vec<usize> = candidate_set(&raw, k, p_lo).into_iter().map(|x| x.0).collect();
            prop_assert!(narrow.len() <= wide.len());
            prop_assert!(narrow.iter().all(|i| wide.contains(i)));
            prop_assert!(wide.len() <= k);
        }
    }
}
