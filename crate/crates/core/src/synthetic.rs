//! Seeded synthetic session generator with a planted first-order Markov
//! structure, the learnability fixture for tests and the demo pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::SessionRecord;

/// Fraction of transitions that follow the planted successor map.
pub const PLANTED_FOLLOW_PROB: f64 = 0.8;

/// Each item has one planted successor (a random permutation cycle);
/// sessions are random walks that follow it with probability 0.8.
/// Raw item ids are 1..=no_items so that id 0 stays out of the corpus.
pub fn planted_markov_sessions(
    no_items: usize,
    no_sessions: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Vec<SessionRecord> {
    assert!(no_items >= 2 && min_len >= 2 && max_len >= min_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successor: Vec<usize> = (0..no_items).collect();
    // Fisher-Yates permutation as the planted transition map
    for i in (1..no_items).rev() {
        let j = rng.random_range(0..=i);
        successor.swap(i, j);
    }
    (0..no_sessions)
        .map(|sid| {
            let len = rng.random_range(min_len..=max_len);
            let mut items = Vec::with_capacity(len);
            let mut cur = rng.random_range(0..no_items);
            items.push(cur as u64 + 1);
            for _ in 1..len {
                cur = if rng.random::<f64>() < PLANTED_FOLLOW_PROB {
                    successor[cur]
                } else {
                    rng.random_range(0..no_items)
                };
                items.push(cur as u64 + 1);
            }
            SessionRecord {
                session_id: format!("syn{sid}"),
                items,
                categories: None,
                timestamps: None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn generator_is_seed_deterministic() {
        let a = planted_markov_sessions(50, 100, 3, 6, 9);
        let b = planted_markov_sessions(50, 100, 3, 6, 9);
        assert_eq!(a, b);
        let c = planted_markov_sessions(50, 100, 3, 6, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn transitions_concentrate_on_one_successor() {
        let sessions = planted_markov_sessions(20, 2000, 4, 4, 3);
        let mut counts: HashMap<(u64, u64), usize> = HashMap::new();
        let mut totals: HashMap<u64, usize> = HashMap::new();
        for s in &sessions {
            for w in s.items.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
                *totals.entry(w[0]).or_default() += 1;
            }
        }
        // the planted successor absorbs roughly 0.8 + 0.2/20 of transitions
        for (&item, &total) in &totals {
            let best = (1..=20u64)
                .map(|next| *counts.get(&(item, next)).unwrap_or(&0))
                .max()
                .unwrap();
            let frac = best as f64 / total as f64;
            assert!(frac > 0.6, "item {item}: top transition fraction {frac}");
        }
    }

    #[test]
    fn session_lengths_respect_bounds() {
        let sessions = planted_markov_sessions(10, 500, 3, 7, 1);
        assert_eq!(sessions.len(), 500);
        for s in &sessions {
            assert!((3..=7).contains(&s.items.len()));
            assert!(s.items.iter().all(|&i| (1..=10).contains(&i)));
        }
    }
}
