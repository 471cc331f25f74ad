//! Clustering metrics for finding-group evaluation: MUC, B³, CEAF and
//! their CoNLL average.
//!
//! A finding is a mention; findings of one patient sharing a group tag
//! (prediction) or gold `group_id` (reference) form a cluster. Clusters
//! never span patients.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hungarian::max_weight_matching;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("mention `{0}` appears in more than one cluster")]
    OverlappingClusters(String),
    #[error("empty cluster")]
    EmptyCluster,
    #[error("mention universes differ: {missing} key mention(s) absent from response, {extra} response mention(s) absent from key (e.g. `{example}`)")]
    UniverseMismatch {
        missing: usize,
        extra: usize,
        example: String,
    },
}

/// Disjoint, non-empty mention sets. Stored canonically (clusters sorted
/// by their smallest mention) so equality is structural.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Clustering {
    clusters: Vec<BTreeSet<String>>,
}

impl Clustering {
    pub fn new<I, C, S>(clusters: I) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for c in clusters {
            let set: BTreeSet<String> = c.into_iter().map(Into::into).collect();
            if set.is_empty() {
                return Err(MetricsError::EmptyCluster);
            }
            for m in &set {
                if !seen.insert(m.clone()) {
                    return Err(MetricsError::OverlappingClusters(m.clone()));
                }
            }
            out.push(set);
        }
        out.sort();
        Ok(Self { clusters: out })
    }

    /// Groups mentions by identical label.
    pub fn from_labels<'a, I>(pairs: I) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut by_label: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (mention, label) in pairs {
            by_label.entry(label).or_default().push(mention);
        }
        Self::new(by_label.into_values())
    }

    /// Disjoint union of per-patient clusterings.
    pub fn union<'a, I: IntoIterator<Item = &'a Clustering>>(parts: I) -> Result<Self, MetricsError> {
        Self::new(parts.into_iter().flat_map(|c| c.clusters.iter().cloned()))
    }

    pub fn clusters(&self) -> &[BTreeSet<String>] {
        &self.clusters
    }

    pub fn mentions(&self) -> BTreeSet<&str> {
        self.clusters.iter().flatten().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    fn cluster_of(&self) -> HashMap<&str, usize> {
        self.clusters
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.iter().map(move |m| (m.as_str(), i)))
            .collect()
    }

    /// Adds a singleton for every mention of `universe` not yet clustered.
    pub fn with_singletons<'a>(&self, universe: impl IntoIterator<Item = &'a str>) -> Self {
        let have = self.mentions();
        let mut clusters = self.clusters.clone();
        for m in universe {
            if !have.contains(m) {
                clusters.push(BTreeSet::from([m.to_string()]));
            }
        }
        clusters.sort();
        clusters.dedup();
        Self { clusters }
    }
}

/// Per patient: mentions labelled by group; one clustering each.
pub fn build_clustering<'a, I>(items: I) -> Result<BTreeMap<String, Clustering>, MetricsError>
where
    I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
{
    let mut by_patient: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
    for (patient, mention, label) in items {
        by_patient.entry(patient).or_default().push((mention, label));
    }
    by_patient
        .into_iter()
        .map(|(p, pairs)| Ok((p.to_string(), Clustering::from_labels(pairs)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }

    fn mean(items: &[Prf]) -> Prf {
        let n = items.len().max(1) as f64;
        Prf {
            precision: items.iter().map(|p| p.precision).sum::<f64>() / n,
            recall: items.iter().map(|p| p.recall).sum::<f64>() / n,
            f1: items.iter().map(|p| p.f1).sum::<f64>() / n,
        }
    }
}

/// MUC score plus a flag raised when a side has no links (its ratio is
/// 0/0 and reported as 0).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MucScore {
    pub prf: Prf,
    pub degenerate: bool,
}

/// Σ_K (|K| − |p(K)|) and Σ_K (|K| − 1), where p(K) partitions K by the
/// clusters of `other` (unclustered mentions count as singletons).
fn muc_links(key: &Clustering, other: &Clustering) -> (usize, usize) {
    let idx = other.cluster_of();
    let mut num = 0;
    let mut den = 0;
    for k in key.clusters() {
        if k.len() < 2 {
            continue;
        }
        let mut parts = BTreeSet::new();
        let mut loose = 0;
        for m in k {
            match idx.get(m.as_str()) {
                Some(&c) => {
                    parts.insert(c);
                }
                None => loose += 1,
            }
        }
        num += k.len() - (parts.len() + loose);
        den += k.len() - 1;
    }
    (num, den)
}

pub fn muc(key: &Clustering, resp: &Clustering) -> MucScore {
    let (rn, rd) = muc_links(key, resp);
    let (pn, pd) = muc_links(resp, key);
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    MucScore {
        prf: Prf::new(ratio(pn, pd), ratio(rn, rd)),
        degenerate: rd == 0 || pd == 0,
    }
}

fn b3_side(key: &Clustering, other: &Clustering) -> f64 {
    let idx = other.cluster_of();
    let mut total = 0.0;
    let mut n = 0usize;
    for k in key.clusters() {
        for m in k {
            n += 1;
            if let Some(&c) = idx.get(m.as_str()) {
                let overlap = other.clusters()[c].intersection(k).count();
                total += overlap as f64 / k.len() as f64;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

pub fn b_cubed(key: &Clustering, resp: &Clustering) -> Prf {
    Prf::new(b3_side(resp, key), b3_side(key, resp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeafVariant {
    /// Entity-based, φ4(K, R) = 2|K∩R| / (|K| + |R|).
    #[default]
    Entity,
    /// Mention-based, φ3(K, R) = |K∩R|.
    Mention,
}

fn ceaf(key: &Clustering, resp: &Clustering, variant: CeafVariant) -> Prf {
    let phi = |k: &BTreeSet<String>, r: &BTreeSet<String>| {
        let common = k.intersection(r).count() as f64;
        match variant {
            CeafVariant::Entity => 2.0 * common / (k.len() + r.len()) as f64,
            CeafVariant::Mention => common,
        }
    };
    let sim: Vec<Vec<f64>> = key
        .clusters()
        .iter()
        .map(|k| resp.clusters().iter().map(|r| phi(k, r)).collect())
        .collect();
    let (_, best) = max_weight_matching(&sim, resp.len());
    let (key_self, resp_self) = match variant {
        CeafVariant::Entity => (key.len() as f64, resp.len() as f64),
        CeafVariant::Mention => (key.mentions().len() as f64, resp.mentions().len() as f64),
    };
    let ratio = |d: f64| if d == 0.0 { 0.0 } else { best / d };
    Prf::new(ratio(resp_self), ratio(key_self))
}

pub fn ceaf_e(key: &Clustering, resp: &Clustering) -> Prf {
    ceaf(key, resp, CeafVariant::Entity)
}

pub fn ceaf_m(key: &Clustering, resp: &Clustering) -> Prf {
    ceaf(key, resp, CeafVariant::Mention)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorefScores {
    pub muc: Prf,
    pub b3: Prf,
    pub ceaf: Prf,
    pub conll_f1: f64,
    #[serde(default)]
    pub muc_degenerate: bool,
    #[serde(default)]
    pub ceaf_variant: CeafVariant,
}

impl CorefScores {
    /// Component-wise mean, e.g. over gold versions.
    pub fn mean(items: &[CorefScores]) -> CorefScores {
        let n = items.len().max(1) as f64;
        CorefScores {
            muc: Prf::mean(&items.iter().map(|s| s.muc).collect::<Vec<_>>()),
            b3: Prf::mean(&items.iter().map(|s| s.b3).collect::<Vec<_>>()),
            ceaf: Prf::mean(&items.iter().map(|s| s.ceaf).collect::<Vec<_>>()),
            conll_f1: items.iter().map(|s| s.conll_f1).sum::<f64>() / n,
            muc_degenerate: items.iter().any(|s| s.muc_degenerate),
            ceaf_variant: items.first().map(|s| s.ceaf_variant).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScorerOptions {
    #[serde(default)]
    pub ceaf: CeafVariant,
    /// Treat key mentions missing from the response as singletons instead
    /// of rejecting the pair.
    #[serde(default)]
    pub missing_as_singletons: bool,
}

/// All three metrics with the universe check.
pub fn score(key: &Clustering, resp: &Clustering, opts: ScorerOptions) -> Result<CorefScores, MetricsError> {
    let key_m = key.mentions();
    let resp_m = resp.mentions();
    let extra: Vec<&&str> = resp_m.difference(&key_m).collect();
    let missing: Vec<&&str> = key_m.difference(&resp_m).collect();
    let patched;
    let resp = if !extra.is_empty() || (!missing.is_empty() && !opts.missing_as_singletons) {
        return Err(MetricsError::UniverseMismatch {
            missing: missing.len(),
            extra: extra.len(),
            example: missing
                .first()
                .or(extra.first())
                .map(|s| s.to_string())
                .unwrap_or_default(),
        });
    } else if !missing.is_empty() {
        patched = resp.with_singletons(key_m.iter().copied());
        &patched
    } else {
        resp
    };
    let m = muc(key, resp);
    let b = b_cubed(key, resp);
    let c = ceaf(key, resp, opts.ceaf);
    Ok(CorefScores {
        muc: m.prf,
        b3: b,
        ceaf: c,
        conll_f1: (m.prf.f1 + b.f1 + c.f1) / 3.0,
        muc_degenerate: m.degenerate,
        ceaf_variant: opts.ceaf,
    })
}

/// Mean of MUC, B³ and CEAF-e F1 (no universe check).
pub fn conll_f1(key: &Clustering, resp: &Clustering) -> f64 {
    (muc(key, resp).prf.f1 + b_cubed(key, resp).f1 + ceaf_e(key, resp).f1) / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cl(clusters: &[&[&str]]) -> Clustering {
        Clustering::new(clusters.iter().map(|c| c.iter().copied())).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn running_example() {
        let key = cl(&[&["a", "b", "c"]]);
        let resp = cl(&[&["a", "b"], &["c"]]);
        let m = muc(&key, &resp).prf;
        assert!(close(m.recall, 0.5) && close(m.precision, 1.0) && close(m.f1, 2.0 / 3.0));
        let b = b_cubed(&key, &resp);
        assert!(close(b.recall, 5.0 / 9.0) && close(b.precision, 1.0) && close(b.f1, 5.0 / 7.0));
        let c = ceaf_e(&key, &resp);
        assert!(close(c.precision, 0.4) && close(c.recall, 0.8) && close(c.f1, 8.0 / 15.0));
        let conll = conll_f1(&key, &resp);
        assert!(close(conll, (2.0 / 3.0 + 5.0 / 7.0 + 8.0 / 15.0) / 3.0));
        assert!((conll - 0.6381).abs() < 5e-5);
    }

    #[test]
    fn identical_scores_one() {
        let k = cl(&[&["a", "b"], &["c"]]);
        let s = score(&k, &k, ScorerOptions::default()).unwrap();
        assert_eq!(s.conll_f1, 1.0);
        assert!(!s.muc_degenerate);
    }

    #[test]
    fn all_singletons_degenerate_muc() {
        let k = cl(&[&["a"], &["b"]]);
        let m = muc(&k, &k);
        assert!(m.degenerate);
        assert_eq!(m.prf.f1, 0.0);
    }

    #[test]
    fn b3_all_singletons_response() {
        let key = cl(&[&["a", "b", "c"]]);
        let resp = cl(&[&["a"], &["b"], &["c"]]);
        let b = b_cubed(&key, &resp);
        assert!(close(b.precision, 1.0) && close(b.recall, 1.0 / 3.0));
    }

    #[test]
    fn ceaf_disjoint_is_zero() {
        let c = ceaf_e(&cl(&[&["a", "b"]]), &cl(&[&["x", "y"]]));
        assert_eq!(c.f1, 0.0);
    }

    #[test]
    fn ceaf_mention_variant() {
        let key = cl(&[&["a", "b", "c"]]);
        let resp = cl(&[&["a", "b"], &["c"]]);
        let c = ceaf_m(&key, &resp);
        assert!(close(c.precision, 2.0 / 3.0) && close(c.recall, 2.0 / 3.0));
    }

    #[test]
    fn labels_group_mentions() {
        let c = Clustering::from_labels([("1", "a"), ("2", "a"), ("3", "b")]).unwrap();
        assert_eq!(c, cl(&[&["1", "2"], &["3"]]));
        let c = Clustering::from_labels([("1", "a"), ("2", "b"), ("3", "c")]).unwrap();
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn clusters_never_span_patients() {
        let per = build_clustering([("p1", "1", "nod"), ("p2", "2", "nod"), ("p1", "3", "nod")]).unwrap();
        assert_eq!(per["p1"], cl(&[&["1", "3"]]));
        assert_eq!(per["p2"], cl(&[&["2"]]));
        let pooled = Clustering::union(per.values()).unwrap();
        assert_eq!(pooled.len(), 2);
    }

    #[test]
    fn universe_mismatch_rejected_unless_configured() {
        let key = cl(&[&["a", "b"], &["c"]]);
        let resp = cl(&[&["a", "b"]]);
        assert!(matches!(
            score(&key, &resp, ScorerOptions::default()),
            Err(MetricsError::UniverseMismatch {
                missing: 1,
                extra: 0,
                ..
            })
        ));
        let s = score(
            &key,
            &resp,
            ScorerOptions {
                missing_as_singletons: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(s.conll_f1, 1.0);
        let extra = cl(&[&["a", "b"], &["c"], &["z"]]);
        assert!(score(
            &key,
            &extra,
            ScorerOptions {
                missing_as_singletons: true,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn invalid_clusterings() {
        assert_eq!(
            Clustering::new(vec![vec!["a"], vec!["a"]]),
            Err(MetricsError::OverlappingClusters("a".into()))
        );
        assert_eq!(
            Clustering::new(vec![Vec::<&str>::new()]),
            Err(MetricsError::EmptyCluster)
        );
    }
}
