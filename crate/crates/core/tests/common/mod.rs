//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use planner::landuse::ZonePlan;
use planner::zonedisc::Corpus;

/// Two archetypes with disjoint grid vocabularies: a diamond blob and its
/// complement. Each document mixes the archetypes in random proportion and
/// every trajectory walks inside one archetype's grids.
pub fn planted_corpus(n: usize, docs: usize, seed: u64) -> (Corpus, ZonePlan) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cr, cc) = (rng.random_range(n / 3..=2 * n / 3) as i64, rng.random_range(n / 3..=2 * n / 3) as i64);
    let radius = (n as i64 * 2) / 5;
    let labels: Vec<usize> = (0..n * n)
        .map(|g| {
            let (r, c) = ((g / n) as i64, (g % n) as i64);
            usize::from((r - cr).abs() + (c - cc).abs() <= radius)
        })
        .collect();
    let cells: [Vec<usize>; 2] = [0, 1].map(|k| (0..n * n).filter(|&g| labels[g] == k).collect());
    let documents = (0..docs)
        .map(|_| {
            let share = rng.random_range(0.2..0.8);
            let mut doc = Vec::new();
            for _ in 0..30 {
                let k = usize::from(rng.random::<f64>() < share);
                let mut cell = *cells[k].choose(&mut rng).unwrap();
                for _ in 0..20 {
                    doc.push(cell);
                    let (r, c) = (cell / n, cell % n);
                    let next = match rng.random_range(0..4) {
                        0 if r > 0 => cell - n,
                        1 if r + 1 < n => cell + n,
                        2 if c > 0 => cell - 1,
                        3 if c + 1 < n => cell + 1,
                        _ => cell,
                    };
                    if labels[next] == k {
                        cell = next;
                    }
                }
            }
            doc
        })
        .collect();
    (Corpus::new(n * n, documents).unwrap(), ZonePlan::new(n, labels).unwrap())
}
