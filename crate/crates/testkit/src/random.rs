//! Seeded random instances for the oracle comparisons.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rtk_core::grouping_metrics::Clustering;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Two token sequences over a small vocabulary so long common
/// subsequences actually occur.
pub fn token_pair(rng: &mut StdRng, max_len: usize, vocab: usize) -> (Vec<String>, Vec<String>) {
    let seq = |rng: &mut StdRng| {
        let n = rng.random_range(0..=max_len);
        (0..n)
            .map(|_| format!("w{}", rng.random_range(0..vocab)))
            .collect::<Vec<_>>()
    };
    let a = seq(rng);
    let b = seq(rng);
    (a, b)
}

/// Random partition of `mentions` into at most `max_clusters` groups.
pub fn partition(rng: &mut StdRng, mentions: &[String], max_clusters: usize) -> Clustering {
    let k = rng.random_range(1..=max_clusters.max(1));
    let labels: Vec<String> = mentions
        .iter()
        .map(|_| format!("g{}", rng.random_range(0..k)))
        .collect();
    Clustering::from_labels(
        mentions
            .iter()
            .map(String::as_str)
            .zip(labels.iter().map(String::as_str)),
    )
    .expect("labels partition the mentions")
}

/// Key and response over the same universe of 1..=`max_mentions` mentions.
pub fn clustering_pair(rng: &mut StdRng, max_mentions: usize, max_clusters: usize) -> (Clustering, Clustering) {
    let n = rng.random_range(1..=max_mentions);
    let mentions: Vec<String> = (0..n).map(|i| format!("m{i}")).collect();
    (
        partition(rng, &mentions, max_clusters),
        partition(rng, &mentions, max_clusters),
    )
}
