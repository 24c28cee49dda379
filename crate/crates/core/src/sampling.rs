use rand::seq::index;
use rand::Rng;

/// Draws `count` members of `pool`: uniformly without replacement when the
/// pool is large enough, otherwise every member once (in random order)
/// followed by uniform draws with replacement for the remaining slots.
pub(crate) fn draw_fill<R: Rng + ?Sized>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    if count == 0 || pool.is_empty() {
        return Vec::new();
    }
    let take = count.min(pool.len());
    let mut out: Vec<usize> = index::sample(rng, pool.len(), take)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    while out.len() < count {
        out.push(pool[rng.random_range(0..pool.len())]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distinct_when_pool_is_large_enough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool: Vec<usize> = (10..30).collect();
        let mut got = draw_fill(&pool, 7, &mut rng);
        got.sort_unstable();
        got.dedup();
        assert_eq!(got.len(), 7);
        assert!(got.iter().all(|i| pool.contains(i)));
    }

    #[test]
    fn covers_small_pool_then_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let got = draw_fill(&[4, 5, 6], 7, &mut rng);
        assert_eq!(got.len(), 7);
        for p in [4, 5, 6] {
            assert!(got.contains(&p));
        }
        assert!(got.iter().all(|i| [4, 5, 6].contains(i)));
    }

    #[test]
    fn empty_pool_yields_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(draw_fill(&[], 3, &mut rng).is_empty());
    }
}
