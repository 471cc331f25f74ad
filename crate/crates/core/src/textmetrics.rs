//! ROUGE-L and max-ROUGE-L alignment between gold and predicted strings.
//!
//! Tokenization: Unicode NFC, lowercase, split on every maximal run of
//! non-alphanumeric characters. No stemming.

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

/// Token sequence produced by [`tokenize`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn tokenize(text: &str) -> TokenSeq {
    let normalized: String = text.nfc().flat_map(char::to_lowercase).collect();
    TokenSeq(
        normalized
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

/// Length of the longest common subsequence, O(n·m) time, O(m) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(reference: &TokenSeq, candidate: &TokenSeq) -> RougeScore {
    if reference.is_empty() || candidate.is_empty() {
        return RougeScore::default();
    }
    let l = lcs_len(reference.tokens(), candidate.tokens()) as f64;
    RougeScore::from_pr(l / candidate.len() as f64, l / reference.len() as f64)
}

pub fn rouge_l_text(reference: &str, candidate: &str) -> RougeScore {
    rouge_l(&tokenize(reference), &tokenize(candidate))
}

/// Best-match maps in both directions. `fwd[p]` is the gold index chosen by
/// prediction `p`; `rev[g]` the prediction chosen by gold `g`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub fwd: Vec<Option<usize>>,
    pub rev: Vec<Option<usize>>,
    /// F1 of each forward match (0 when unmatched).
    pub fwd_f1: Vec<f64>,
}

/// First index with the strictly largest positive F1, or `None`.
fn argmax_positive(scores: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.enumerate() {
        if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best
}

pub fn align_max_rouge<G: AsRef<str>, P: AsRef<str>>(golds: &[G], preds: &[P]) -> AlignmentResult {
    let gt: Vec<TokenSeq> = golds.iter().map(|g| tokenize(g.as_ref())).collect();
    let pt: Vec<TokenSeq> = preds.iter().map(|p| tokenize(p.as_ref())).collect();
    // f1[p][g]; ROUGE-L F1 is symmetric so one table serves both directions.
    let f1: Vec<Vec<f64>> = pt
        .iter()
        .map(|p| gt.iter().map(|g| rouge_l(g, p).f1).collect())
        .collect();
    let mut fwd = Vec::with_capacity(pt.len());
    let mut fwd_f1 = Vec::with_capacity(pt.len());
    for row in &f1 {
        match argmax_positive(row.iter().copied()) {
            Some((g, s)) => {
                fwd.push(Some(g));
                fwd_f1.push(s);
            }
            None => {
                fwd.push(None);
                fwd_f1.push(0.0);
            }
        }
    }
    let rev = (0..gt.len())
        .map(|g| argmax_positive(f1.iter().map(|row| row[g])).map(|(p, _)| p))
        .collect();
    AlignmentResult { fwd, rev, fwd_f1 }
}

/// Additive tallies behind [`AlignmentRates`], so several reports or
/// patients can be pooled before taking percentages.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentCounts {
    pub golds: usize,
    pub preds: usize,
    pub matched_preds: usize,
    pub f1_sum: f64,
    pub missed_golds: usize,
    pub unnecessary_preds: usize,
    pub duplicated_golds: usize,
}

impl AlignmentCounts {
    pub fn from_alignment(a: &AlignmentResult) -> Self {
        let golds = a.rev.len();
        let preds = a.fwd.len();
        let mut hits = vec![0usize; golds];
        for g in a.fwd.iter().flatten() {
            hits[*g] += 1;
        }
        let mut chosen = vec![false; preds];
        for p in a.rev.iter().flatten() {
            chosen[*p] = true;
        }
        Self {
            golds,
            preds,
            matched_preds: a.fwd.iter().filter(|m| m.is_some()).count(),
            f1_sum: a
                .fwd
                .iter()
                .zip(&a.fwd_f1)
                .filter(|(m, _)| m.is_some())
                .map(|(_, f)| f)
                .sum(),
            missed_golds: hits.iter().filter(|&&h| h == 0).count(),
            unnecessary_preds: chosen.iter().filter(|&&c| !c).count(),
            duplicated_golds: hits.iter().filter(|&&h| h >= 2).count(),
        }
    }

    pub fn add(&mut self, other: &Self) {
        self.golds += other.golds;
        self.preds += other.preds;
        self.matched_preds += other.matched_preds;
        self.f1_sum += other.f1_sum;
        self.missed_golds += other.missed_golds;
        self.unnecessary_preds += other.unnecessary_preds;
        self.duplicated_golds += other.duplicated_golds;
    }

    pub fn rates(&self) -> AlignmentRates {
        let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
        AlignmentRates {
            mean_f1: if self.matched_preds == 0 {
                0.0
            } else {
                self.f1_sum / self.matched_preds as f64
            },
            missed_pct: pct(self.missed_golds, self.golds),
            unnecessary_pct: pct(self.unnecessary_preds, self.preds),
            duplicate_pct: pct(self.duplicated_golds, self.golds),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentRates {
    pub mean_f1: f64,
    pub missed_pct: f64,
    pub unnecessary_pct: f64,
    pub duplicate_pct: f64,
}

impl AlignmentRates {
    /// Element-wise arithmetic mean.
    pub fn mean(items: &[AlignmentRates]) -> AlignmentRates {
        if items.is_empty() {
            return AlignmentRates::default();
        }
        let n = items.len() as f64;
        AlignmentRates {
            mean_f1: items.iter().map(|r| r.mean_f1).sum::<f64>() / n,
            missed_pct: items.iter().map(|r| r.missed_pct).sum::<f64>() / n,
            unnecessary_pct: items.iter().map(|r| r.unnecessary_pct).sum::<f64>() / n,
            duplicate_pct: items.iter().map(|r| r.duplicate_pct).sum::<f64>() / n,
        }
    }
}

pub fn alignment_rates<G: AsRef<str>, P: AsRef<str>>(golds: &[G], preds: &[P]) -> AlignmentRates {
    AlignmentCounts::from_alignment(&align_max_rouge(golds, preds)).rates()
}
