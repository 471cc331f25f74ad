//! Exhaustive reference implementations. Slow on purpose; only small
//! inputs are expected.

use std::collections::BTreeSet;

use rtk_core::grouping_metrics::{CeafVariant, Clustering, CorefScores, Prf};

/// Longest common subsequence by trying every subsequence of the shorter
/// side, longest first.
pub fn brute_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 20, "brute_lcs is exponential in the shorter length");
    let mut best = 0;
    for mask in 0u32..(1u32 << short.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let picked: Vec<&T> = (0..short.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &short[i])
            .collect();
        if is_subsequence(&picked, long) {
            best = len;
        }
    }
    best
}

fn is_subsequence<T: PartialEq>(needle: &[&T], hay: &[T]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == *n))
}

/// ROUGE-L F1 from the exhaustive LCS.
pub fn brute_rouge_f1<T: PartialEq>(reference: &[T], candidate: &[T]) -> f64 {
    let l = brute_lcs(reference, candidate) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn same_cluster(c: &Clustering, a: &str, b: &str) -> bool {
    c.clusters().iter().any(|k| k.contains(a) && k.contains(b))
}

/// Number of blocks `k` splits into under `other`, counted by pairwise
/// comparison: a mention opens a new block unless an earlier one shares
/// its `other` cluster. Mentions unknown to `other` are singletons.
fn blocks(k: &BTreeSet<String>, other: &Clustering) -> usize {
    let ms: Vec<&String> = k.iter().collect();
    (0..ms.len())
        .filter(|&i| !(0..i).any(|j| same_cluster(other, ms[i], ms[j])))
        .count()
}

fn muc_side(key: &Clustering, other: &Clustering) -> (usize, usize) {
    key.clusters()
        .iter()
        .filter(|k| k.len() > 1)
        .fold((0, 0), |(n, d), k| (n + k.len() - blocks(k, other), d + k.len() - 1))
}

fn ratio(n: f64, d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        n / d
    }
}

pub fn brute_muc(key: &Clustering, resp: &Clustering) -> Prf {
    let (rn, rd) = muc_side(key, resp);
    let (pn, pd) = muc_side(resp, key);
    Prf::new(ratio(pn as f64, pd as f64), ratio(rn as f64, rd as f64))
}

/// Per mention, counts partners over the whole universe.
fn b3_side(key: &Clustering, other: &Clustering) -> f64 {
    let universe: Vec<String> = key.mentions().into_iter().map(String::from).collect();
    let mut total = 0.0;
    for m in &universe {
        let mut in_key = 0usize;
        let mut in_both = 0usize;
        for n in &universe {
            if same_cluster(key, m, n) {
                in_key += 1;
                if same_cluster(other, m, n) {
                    in_both += 1;
                }
            }
        }
        total += in_both as f64 / in_key as f64;
    }
    ratio(total, universe.len() as f64)
}

pub fn brute_b_cubed(key: &Clustering, resp: &Clustering) -> Prf {
    Prf::new(b3_side(resp, key), b3_side(key, resp))
}

fn phi(variant: CeafVariant, a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let common = a.intersection(b).count() as f64;
    match variant {
        CeafVariant::Entity => 2.0 * common / (a.len() + b.len()) as f64,
        CeafVariant::Mention => common,
    }
}

/// Best total similarity over every one-to-one matching.
pub fn brute_ceaf_phi(key: &Clustering, resp: &Clustering, variant: CeafVariant) -> f64 {
    let (rows, cols, flip) = if key.len() <= resp.len() {
        (key.clusters(), resp.clusters(), false)
    } else {
        (resp.clusters(), key.clusters(), true)
    };
    assert!(cols.len() <= 8, "brute_ceaf_phi enumerates all matchings");
    let mut used = vec![false; cols.len()];
    let mut best = 0.0f64;
    search(rows, cols, flip, variant, 0, 0.0, &mut used, &mut best);
    best
}

#[allow(clippy::too_many_arguments)]
fn search(
    rows: &[BTreeSet<String>],
    cols: &[BTreeSet<String>],
    flip: bool,
    variant: CeafVariant,
    i: usize,
    acc: f64,
    used: &mut [bool],
    best: &mut f64,
) {
    if i == rows.len() {
        *best = best.max(acc);
        return;
    }
    for j in 0..cols.len() {
        if used[j] {
            continue;
        }
        used[j] = true;
        let s = if flip {
            phi(variant, &cols[j], &rows[i])
        } else {
            phi(variant, &rows[i], &cols[j])
        };
        search(rows, cols, flip, variant, i + 1, acc + s, used, best);
        used[j] = false;
    }
}

pub fn brute_ceaf(key: &Clustering, resp: &Clustering, variant: CeafVariant) -> Prf {
    let best = brute_ceaf_phi(key, resp, variant);
    let (k, r) = match variant {
        CeafVariant::Entity => (key.len() as f64, resp.len() as f64),
        CeafVariant::Mention => (key.mentions().len() as f64, resp.mentions().len() as f64),
    };
    Prf::new(ratio(best, r), ratio(best, k))
}

/// All three metrics recomputed by enumeration, CEAF entity-based.
pub fn brute_force_oracle(key: &Clustering, resp: &Clustering) -> CorefScores {
    let muc = brute_muc(key, resp);
    let b3 = brute_b_cubed(key, resp);
    let ceaf = brute_ceaf(key, resp, CeafVariant::Entity);
    let links = |c: &Clustering| c.clusters().iter().any(|k| k.len() > 1);
    CorefScores {
        muc,
        b3,
        ceaf,
        conll_f1: (muc.f1 + b3.f1 + ceaf.f1) / 3.0,
        muc_degenerate: !links(key) || !links(resp),
        ceaf_variant: CeafVariant::Entity,
    }
}
