//! Finding, group-name and grouping evaluation against one or more gold
//! versions. Every score is computed per version and then averaged.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::Assignment;
use crate::corpus::{merged_gold_findings, GoldAnnotations};
use crate::extract::{filter_findings, AbsenceDetector, FilterStrength, Finding};
use crate::grouping_metrics::{score, Clustering, CorefScores, MetricsError, ScorerOptions};
use crate::groupnames::GroupNameList;
use crate::textmetrics::{align_max_rouge, rouge_l_text, AlignmentCounts, AlignmentRates, RougeScore};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no gold versions given")]
    NoGold,
    #[error("gold `{version}`: report `{report_id}` is not in the corpus")]
    UnknownReport { version: String, report_id: String },
    #[error("gold `{version}`, patient `{patient}`: {source}")]
    Metrics {
        version: String,
        patient: String,
        source: MetricsError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionResult<T> {
    pub version_id: String,
    pub scores: T,
}

/// Scores against each gold version plus their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T> {
    pub per_version: Vec<VersionResult<T>>,
    pub average: T,
}

fn mean_rouge(items: &[RougeScore]) -> RougeScore {
    let n = items.len().max(1) as f64;
    RougeScore {
        precision: items.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: items.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: items.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FindingScores {
    /// Mean over gold reports of ROUGE-L between the space-joined gold and
    /// unfiltered predicted findings.
    pub report_rl: RougeScore,
    /// Merged golds vs filtered predictions, pooled over reports.
    pub finding: AlignmentRates,
    pub reports: usize,
}

impl FindingScores {
    fn mean(items: &[FindingScores]) -> FindingScores {
        FindingScores {
            report_rl: mean_rouge(&items.iter().map(|s| s.report_rl).collect::<Vec<_>>()),
            finding: AlignmentRates::mean(&items.iter().map(|s| s.finding).collect::<Vec<_>>()),
            reports: items.iter().map(|s| s.reports).max().unwrap_or(0),
        }
    }
}

fn group_texts<'a>(items: impl Iterator<Item = (&'a str, &'a str)>) -> BTreeMap<&'a str, Vec<&'a str>> {
    let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (report, text) in items {
        out.entry(report).or_default().push(text);
    }
    out
}

/// `preds` are unfiltered; the absence filter is applied here for the
/// finding-level scores.
pub fn eval_findings(
    golds: &[GoldAnnotations],
    preds: &[Finding],
    strength: FilterStrength,
    detector: &dyn AbsenceDetector,
) -> Result<MetricReport<FindingScores>, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::NoGold);
    }
    let filtered = filter_findings(preds, strength, detector);
    let raw_by_report = group_texts(preds.iter().map(|f| (f.report_id.as_str(), f.text.as_str())));
    let kept_by_report = group_texts(filtered.iter().map(|f| (f.report_id.as_str(), f.text.as_str())));

    let mut per_version = Vec::new();
    for gold in golds {
        let gold_by_report = group_texts(gold.findings.iter().map(|f| (f.report_id.as_str(), f.text.as_str())));
        let report_scores: Vec<RougeScore> = gold_by_report
            .iter()
            .map(|(report, texts)| {
                let pred = raw_by_report.get(report).map(|v| v.join(" ")).unwrap_or_default();
                rouge_l_text(&texts.join(" "), &pred)
            })
            .collect();

        let merged = merged_gold_findings(gold);
        let merged_by_report = group_texts(merged.iter().map(|m| (m.report_id.as_str(), m.text.as_str())));
        let reports: BTreeSet<&str> = merged_by_report.keys().chain(kept_by_report.keys()).copied().collect();
        let mut counts = AlignmentCounts::default();
        for r in reports {
            let g = merged_by_report.get(r).map(Vec::as_slice).unwrap_or_default();
            let p = kept_by_report.get(r).map(Vec::as_slice).unwrap_or_default();
            counts.add(&AlignmentCounts::from_alignment(&align_max_rouge(g, p)));
        }
        per_version.push(VersionResult {
            version_id: gold.version_id.clone(),
            scores: FindingScores {
                report_rl: mean_rouge(&report_scores),
                finding: counts.rates(),
                reports: report_scores.len(),
            },
        });
    }
    let average = FindingScores::mean(&per_version.iter().map(|v| v.scores.clone()).collect::<Vec<_>>());
    Ok(MetricReport { per_version, average })
}

/// Gold names per patient: the names of groups used by that patient's
/// findings, in gold-file order.
fn gold_names_by_patient<'a>(
    gold: &'a GoldAnnotations,
    report_patient: &HashMap<String, String>,
) -> Result<BTreeMap<String, Vec<&'a str>>, EvalError> {
    let mut used: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for f in &gold.findings {
        let p = report_patient
            .get(&f.report_id)
            .ok_or_else(|| EvalError::UnknownReport {
                version: gold.version_id.clone(),
                report_id: f.report_id.clone(),
            })?;
        used.entry(p.clone()).or_default().insert(f.group_id.as_str());
    }
    Ok(used
        .into_iter()
        .map(|(p, ids)| {
            let names = gold
                .group_names
                .iter()
                .filter(|(id, _)| ids.contains(id.as_str()))
                .map(|(_, n)| n.as_str())
                .collect();
            (p, names)
        })
        .collect())
}

fn name_counts(golds: &BTreeMap<String, Vec<&str>>, preds: &BTreeMap<String, Vec<&str>>) -> AlignmentCounts {
    let patients: BTreeSet<&String> = golds.keys().chain(preds.keys()).collect();
    let mut counts = AlignmentCounts::default();
    for p in patients {
        let g = golds.get(p).map(Vec::as_slice).unwrap_or_default();
        let q = preds.get(p).map(Vec::as_slice).unwrap_or_default();
        counts.add(&AlignmentCounts::from_alignment(&align_max_rouge(g, q)));
    }
    counts
}

/// Predicted names vs gold names, aligned per patient and pooled.
pub fn eval_names(
    golds: &[GoldAnnotations],
    preds: &[GroupNameList],
    report_patient: &HashMap<String, String>,
) -> Result<MetricReport<AlignmentRates>, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::NoGold);
    }
    let pred_map: BTreeMap<String, Vec<&str>> = preds
        .iter()
        .map(|l| {
            (
                l.patient_id.clone(),
                l.names.iter().map(|n| n.display.as_str()).collect(),
            )
        })
        .collect();
    let mut per_version = Vec::new();
    for gold in golds {
        let g = gold_names_by_patient(gold, report_patient)?;
        per_version.push(VersionResult {
            version_id: gold.version_id.clone(),
            scores: name_counts(&g, &pred_map).rates(),
        });
    }
    let average = AlignmentRates::mean(&per_version.iter().map(|v| v.scores).collect::<Vec<_>>());
    Ok(MetricReport { per_version, average })
}

/// One gold version scored as if it were the prediction for the other, in
/// both directions, then averaged.
pub fn eval_names_oracle(
    a: &GoldAnnotations,
    b: &GoldAnnotations,
    report_patient: &HashMap<String, String>,
) -> Result<MetricReport<AlignmentRates>, EvalError> {
    let ga = gold_names_by_patient(a, report_patient)?;
    let gb = gold_names_by_patient(b, report_patient)?;
    let per_version = vec![
        VersionResult {
            version_id: format!("{} vs {}", b.version_id, a.version_id),
            scores: name_counts(&ga, &gb).rates(),
        },
        VersionResult {
            version_id: format!("{} vs {}", a.version_id, b.version_id),
            scores: name_counts(&gb, &ga).rates(),
        },
    ];
    let average = AlignmentRates::mean(&per_version.iter().map(|v| v.scores).collect::<Vec<_>>());
    Ok(MetricReport { per_version, average })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupingScores {
    /// All patients' clusters pooled into one clustering.
    pub pooled: CorefScores,
    pub per_patient: BTreeMap<String, CorefScores>,
}

impl GroupingScores {
    fn mean(items: &[GroupingScores]) -> GroupingScores {
        let pooled = CorefScores::mean(&items.iter().map(|s| s.pooled).collect::<Vec<_>>());
        let patients: BTreeSet<&String> = items.iter().flat_map(|s| s.per_patient.keys()).collect();
        let per_patient = patients
            .into_iter()
            .map(|p| {
                let v: Vec<CorefScores> = items.iter().filter_map(|s| s.per_patient.get(p).copied()).collect();
                (p.clone(), CorefScores::mean(&v))
            })
            .collect();
        GroupingScores { pooled, per_patient }
    }
}

fn gold_clusterings(
    gold: &GoldAnnotations,
    report_patient: &HashMap<String, String>,
) -> Result<BTreeMap<String, Clustering>, EvalError> {
    let mut by_patient: BTreeMap<String, Vec<(&str, &str)>> = BTreeMap::new();
    for f in &gold.findings {
        let p = report_patient
            .get(&f.report_id)
            .ok_or_else(|| EvalError::UnknownReport {
                version: gold.version_id.clone(),
                report_id: f.report_id.clone(),
            })?;
        by_patient
            .entry(p.clone())
            .or_default()
            .push((f.finding_id.as_str(), f.group_id.as_str()));
    }
    by_patient
        .into_iter()
        .map(|(p, pairs)| {
            let c = Clustering::from_labels(pairs).map_err(|source| EvalError::Metrics {
                version: gold.version_id.clone(),
                patient: p.clone(),
                source,
            })?;
            Ok((p, c))
        })
        .collect()
}

/// Predicted assignments (made on gold findings) vs each gold grouping.
pub fn eval_grouping(
    golds: &[GoldAnnotations],
    assignments: &[Assignment],
    report_patient: &HashMap<String, String>,
    opts: ScorerOptions,
) -> Result<MetricReport<GroupingScores>, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::NoGold);
    }
    let mut per_version = Vec::new();
    for gold in golds {
        let key = gold_clusterings(gold, report_patient)?;
        let finding_patient: HashMap<&str, &str> = gold
            .findings
            .iter()
            .map(|f| (f.finding_id.as_str(), report_patient[&f.report_id].as_str()))
            .collect();
        let mut pairs: BTreeMap<String, Vec<(&str, &str)>> = BTreeMap::new();
        let mut stray: Vec<(&str, &str)> = Vec::new();
        for a in assignments {
            match finding_patient.get(a.finding_id.as_str()) {
                Some(p) => pairs
                    .entry(p.to_string())
                    .or_default()
                    .push((&a.finding_id, &a.group.tag)),
                None => stray.push((&a.finding_id, &a.group.tag)),
            }
        }
        let metrics_err = |patient: &str, source| EvalError::Metrics {
            version: gold.version_id.clone(),
            patient: patient.to_string(),
            source,
        };
        let mut resp: BTreeMap<String, Clustering> = BTreeMap::new();
        for (p, ps) in pairs {
            let c = Clustering::from_labels(ps).map_err(|e| metrics_err(&p, e))?;
            resp.insert(p, c);
        }
        let mut per_patient = BTreeMap::new();
        for (p, k) in &key {
            let r = resp.get(p).cloned().unwrap_or_default();
            per_patient.insert(p.clone(), score(k, &r, opts).map_err(|e| metrics_err(p, e))?);
        }
        // Predictions on findings outside the gold set make the universes
        // differ; pooled scoring reports that.
        let mut resp_all = Clustering::union(resp.values()).map_err(|e| metrics_err("*", e))?;
        if !stray.is_empty() {
            let extra = Clustering::from_labels(stray).map_err(|e| metrics_err("*", e))?;
            resp_all = Clustering::union([&resp_all, &extra]).map_err(|e| metrics_err("*", e))?;
        }
        let key_all = Clustering::union(key.values()).map_err(|e| metrics_err("*", e))?;
        let pooled = score(&key_all, &resp_all, opts).map_err(|e| metrics_err("*", e))?;
        per_version.push(VersionResult {
            version_id: gold.version_id.clone(),
            scores: GroupingScores { pooled, per_patient },
        });
    }
    let average = GroupingScores::mean(&per_version.iter().map(|v| v.scores.clone()).collect::<Vec<_>>());
    Ok(MetricReport { per_version, average })
}

/// Inter-annotator agreement: version `b` scored as a prediction of `a`.
pub fn gold_agreement(
    a: &GoldAnnotations,
    b: &GoldAnnotations,
    report_patient: &HashMap<String, String>,
    opts: ScorerOptions,
) -> Result<CorefScores, EvalError> {
    let ka = Clustering::union(gold_clusterings(a, report_patient)?.values());
    let kb = Clustering::union(gold_clusterings(b, report_patient)?.values());
    let wrap = |source| EvalError::Metrics {
        version: format!("{} vs {}", b.version_id, a.version_id),
        patient: "*".into(),
        source,
    };
    score(&ka.map_err(wrap)?, &kb.map_err(wrap)?, opts).map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::Origin;
    use crate::corpus::parse_gold;
    use crate::extract::RuleDetector;
    use crate::grouping_metrics::conll_f1;
    use crate::groupnames::GroupName;

    fn index() -> HashMap<String, String> {
        [("r1", "p1"), ("r2", "p1"), ("r3", "p2")]
            .iter()
            .map(|(r, p)| (r.to_string(), p.to_string()))
            .collect()
    }

    fn gold(version: &str, findings: &[(&str, &str, &str, &str)], names: &[(&str, &str)]) -> GoldAnnotations {
        let fs: Vec<serde_json::Value> = findings
            .iter()
            .map(|(id, r, t, g)| serde_json::json!({"finding_id": id, "report_id": r, "text": t, "group_id": g}))
            .collect();
        let gn: serde_json::Map<String, serde_json::Value> = names
            .iter()
            .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
            .collect();
        parse_gold(
            &serde_json::json!({"findings": fs, "group_names": gn}).to_string(),
            version,
        )
        .unwrap()
    }

    fn a(id: &str, g: &str) -> Assignment {
        Assignment {
            finding_id: id.into(),
            group: GroupName::new(g).unwrap(),
            origin: Origin::Existing,
        }
    }

    fn pred(id: &str, report: &str, text: &str) -> Finding {
        Finding {
            finding_id: id.into(),
            report_id: report.into(),
            text: text.into(),
            provenance: Default::default(),
        }
    }

    #[test]
    fn findings_perfect_prediction() {
        let g = gold(
            "ann1",
            &[
                ("g1", "r1", "left nodule", "a"),
                ("g2", "r1", "small", "a"),
                ("g3", "r3", "effusion", "b"),
            ],
            &[("a", "Left nodule"), ("b", "Effusion")],
        );
        let preds = [pred("r1_0", "r1", "left nodule; small"), pred("r3_0", "r3", "effusion")];
        let rep = eval_findings(&[g], &preds, FilterStrength::Weak, &RuleDetector::default()).unwrap();
        assert_eq!(rep.average.report_rl.f1, 1.0);
        assert_eq!(rep.average.finding.mean_f1, 1.0);
        assert_eq!(rep.average.finding.missed_pct, 0.0);
        assert_eq!(rep.average.reports, 2);
    }

    #[test]
    fn absent_prediction_is_filtered_for_finding_level_only() {
        let g = gold("ann1", &[("g1", "r1", "stable nodule", "a")], &[("a", "Nodule")]);
        let preds = [pred("r1_0", "r1", "stable nodule"), pred("r1_1", "r1", "no effusion")];
        let rep = eval_findings(&[g], &preds, FilterStrength::Weak, &RuleDetector::default()).unwrap();
        assert_eq!(rep.average.finding.unnecessary_pct, 0.0);
        assert!(rep.average.report_rl.precision < 1.0);
    }

    #[test]
    fn names_against_versions() {
        let g = gold(
            "ann1",
            &[("g1", "r1", "x", "a"), ("g2", "r3", "y", "b")],
            &[("a", "RUL nodule"), ("b", "Effusion")],
        );
        let preds = vec![
            GroupNameList::new("p1", Default::default(), vec![GroupName::new("RUL nodule").unwrap()]),
            GroupNameList::new("p2", Default::default(), vec![GroupName::new("Emphysema").unwrap()]),
        ];
        let rep = eval_names(&[g], &preds, &index()).unwrap();
        assert_eq!(rep.average.missed_pct, 50.0);
        assert_eq!(rep.average.unnecessary_pct, 50.0);
        assert_eq!(rep.average.mean_f1, 1.0);
    }

    #[test]
    fn oracle_names_identical_versions() {
        let g = gold("ann1", &[("g1", "r1", "x", "a")], &[("a", "RUL nodule")]);
        let mut h = g.clone();
        h.version_id = "ann2".into();
        let rep = eval_names_oracle(&g, &h, &index()).unwrap();
        assert_eq!(rep.average.mean_f1, 1.0);
        assert_eq!(rep.per_version.len(), 2);
    }

    #[test]
    fn grouping_two_version_average() {
        let fs = [
            ("g1", "r1", "x", "a"),
            ("g2", "r2", "y", "a"),
            ("g3", "r2", "z", "b"),
            ("g4", "r3", "w", "c"),
        ];
        let va = gold("A", &fs, &[("a", "A"), ("b", "B"), ("c", "C")]);
        let fs_b = [
            ("g1", "r1", "x", "a"),
            ("g2", "r2", "y", "b"),
            ("g3", "r2", "z", "b"),
            ("g4", "r3", "w", "c"),
        ];
        let vb = gold("B", &fs_b, &[("a", "A"), ("b", "B"), ("c", "C")]);
        let preds = [a("g1", "n"), a("g2", "n"), a("g3", "n"), a("g4", "n")];
        let rep = eval_grouping(&[va.clone(), vb.clone()], &preds, &index(), ScorerOptions::default()).unwrap();

        let key = |g: &GoldAnnotations| Clustering::union(gold_clusterings(g, &index()).unwrap().values()).unwrap();
        let resp = Clustering::new(vec![vec!["g1", "g2", "g3"], vec!["g4"]]).unwrap();
        let expected = (conll_f1(&key(&va), &resp) + conll_f1(&key(&vb), &resp)) / 2.0;
        assert_eq!(rep.average.pooled.conll_f1, expected);
        assert_eq!(rep.per_version[0].scores.per_patient.len(), 2);
    }

    #[test]
    fn grouping_universe_mismatch() {
        let g = gold("A", &[("g1", "r1", "x", "a"), ("g2", "r1", "y", "a")], &[("a", "A")]);
        let err = eval_grouping(
            std::slice::from_ref(&g),
            &[a("g1", "n")],
            &index(),
            ScorerOptions::default(),
        );
        assert!(matches!(err, Err(EvalError::Metrics { .. })));
        let err = eval_grouping(
            &[g],
            &[a("g1", "n"), a("g2", "n"), a("zz", "n")],
            &index(),
            ScorerOptions::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn agreement_of_identical_versions() {
        let g = gold("A", &[("g1", "r1", "x", "a"), ("g2", "r2", "y", "a")], &[("a", "A")]);
        let s = gold_agreement(&g, &g, &index(), ScorerOptions::default()).unwrap();
        assert_eq!(s.conll_f1, 1.0);
    }
}
