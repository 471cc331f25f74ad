//! Per-patient report collections and gold annotation files.
//!
//! Corpus files are RFC-4180 CSV with the header
//! `patient_id,report_id,date,note_tag,QOClassificationName,ReportText`
//! (column order is free). Gold files are JSON:
//!
//! ```json
//! {
//!   "version_id": "ann1",
//!   "findings": [{"finding_id": "f1", "report_id": "r1", "text": "...", "group_id": "g1"}],
//!   "group_names": {"g1": "right upper lobe nodule"},
//!   "same_report_links": [["f1", "f2"]]
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CORPUS_COLUMNS: [&str; 6] = [
    "patient_id",
    "report_id",
    "date",
    "note_tag",
    "QOClassificationName",
    "ReportText",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus header is missing column `{0}`")]
    MissingColumn(String),
    #[error("malformed CSV at report row {row}: {message}")]
    MalformedRow { row: usize, message: String },
    #[error("report row {row}: unparseable date `{value}`")]
    BadDate { row: usize, value: String },
    #[error("report row {row}: empty report text")]
    EmptyText { row: usize },
    #[error("report row {row}: duplicate report_id `{report_id}`")]
    DuplicateReport { row: usize, report_id: String },
    #[error("gold file {path}: {message}")]
    GoldSyntax { path: String, message: String },
    #[error("gold `{version}`: finding `{finding_id}` references unknown group `{group_id}`")]
    DanglingGroup {
        version: String,
        finding_id: String,
        group_id: String,
    },
    #[error("gold `{version}`: duplicate finding_id `{finding_id}`")]
    DuplicateFinding { version: String, finding_id: String },
    #[error("gold `{version}`: same-report link {a} -- {b}: {reason}")]
    BadLink {
        version: String,
        a: String,
        b: String,
        reason: String,
    },
}

/// One dated exam document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: String,
    pub patient_id: String,
    pub date: NaiveDate,
    pub note_tag: String,
    pub classification: String,
    pub text: String,
}

/// A patient's reports in ascending `(date, report_id)` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub reports: Vec<Report>,
}

impl PatientRecord {
    /// Builds a record, sorting reports. All reports must share `patient_id`.
    pub fn new(patient_id: impl Into<String>, mut reports: Vec<Report>) -> Self {
        let patient_id = patient_id.into();
        debug_assert!(reports.iter().all(|r| r.patient_id == patient_id));
        reports.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.report_id.cmp(&b.report_id)));
        Self { patient_id, reports }
    }

    pub fn report(&self, report_id: &str) -> Option<&Report> {
        self.reports.iter().find(|r| r.report_id == report_id)
    }
}

/// All patients of a corpus file, ordered by `patient_id`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub patients: Vec<PatientRecord>,
}

impl Corpus {
    pub fn patient(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == patient_id)
    }

    pub fn reports(&self) -> impl Iterator<Item = &Report> {
        self.patients.iter().flat_map(|p| p.reports.iter())
    }

    /// `report_id -> patient_id` lookup.
    pub fn report_index(&self) -> HashMap<String, String> {
        self.reports()
            .map(|r| (r.report_id.clone(), r.patient_id.clone()))
            .collect()
    }

    /// Keeps only the listed patients (all when `ids` is empty).
    pub fn restrict(mut self, ids: &[String]) -> Self {
        if !ids.is_empty() {
            let keep: HashSet<&String> = ids.iter().collect();
            self.patients.retain(|p| keep.contains(&p.patient_id));
        }
        self
    }
}

/// Accepts ISO-8601 dates, truncating any time-of-day part.
pub fn parse_date(value: &str) -> Option<NaiveDate> {
    let v = value.trim();
    let day = v.get(..10)?;
    let rest = &v[10..];
    if !(rest.is_empty() || rest.starts_with('T') || rest.starts_with(' ')) {
        return None;
    }
    NaiveDate::parse_from_str(day, "%Y-%m-%d").ok()
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&bytes)
}

/// Parses corpus CSV bytes. Row numbers in errors count data rows from 1.
pub fn parse_corpus(bytes: &[u8]) -> Result<Corpus, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::MalformedRow {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let mut col = [0usize; 6];
    for (slot, name) in col.iter_mut().zip(CORPUS_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| CorpusError::MissingColumn(name.to_string()))?;
    }

    let mut seen = HashSet::new();
    let mut by_patient: BTreeMap<String, Vec<Report>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| CorpusError::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let field = |k: usize| record.get(col[k]).unwrap_or_default();
        let date = parse_date(field(2)).ok_or_else(|| CorpusError::BadDate {
            row,
            value: field(2).to_string(),
        })?;
        let text = field(5);
        if text.trim().is_empty() {
            return Err(CorpusError::EmptyText { row });
        }
        let report_id = field(1).to_string();
        if !seen.insert(report_id.clone()) {
            return Err(CorpusError::DuplicateReport { row, report_id });
        }
        let report = Report {
            report_id,
            patient_id: field(0).to_string(),
            date,
            note_tag: field(3).to_string(),
            classification: field(4).to_string(),
            text: text.to_string(),
        };
        by_patient.entry(report.patient_id.clone()).or_default().push(report);
    }
    Ok(Corpus {
        patients: by_patient
            .into_iter()
            .map(|(id, reports)| PatientRecord::new(id, reports))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldFinding {
    pub finding_id: String,
    pub report_id: String,
    pub text: String,
    pub group_id: String,
}

/// One annotator's version of the gold timeline findings and groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotations {
    pub version_id: String,
    pub findings: Vec<GoldFinding>,
    pub group_names: IndexMap<String, String>,
    #[serde(default)]
    pub same_report_links: BTreeSet<(String, String)>,
}

#[derive(Deserialize)]
struct GoldFile {
    findings: Vec<GoldFinding>,
    group_names: IndexMap<String, String>,
    #[serde(default)]
    same_report_links: Vec<(String, String)>,
}

impl GoldAnnotations {
    /// Checks ids, group references and link locality.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut report_of: HashMap<&str, &str> = HashMap::new();
        for f in &self.findings {
            if report_of.insert(f.finding_id.as_str(), f.report_id.as_str()).is_some() {
                return Err(CorpusError::DuplicateFinding {
                    version: self.version_id.clone(),
                    finding_id: f.finding_id.clone(),
                });
            }
            if !self.group_names.contains_key(&f.group_id) {
                return Err(CorpusError::DanglingGroup {
                    version: self.version_id.clone(),
                    finding_id: f.finding_id.clone(),
                    group_id: f.group_id.clone(),
                });
            }
        }
        for (a, b) in &self.same_report_links {
            let bad = |reason: &str| CorpusError::BadLink {
                version: self.version_id.clone(),
                a: a.clone(),
                b: b.clone(),
                reason: reason.to_string(),
            };
            match (report_of.get(a.as_str()), report_of.get(b.as_str())) {
                (Some(ra), Some(rb)) if ra == rb => {}
                (Some(_), Some(_)) => return Err(bad("findings belong to different reports")),
                _ => return Err(bad("unknown finding_id")),
            }
        }
        Ok(())
    }

    /// Group name of a finding's group.
    pub fn group_name(&self, group_id: &str) -> Option<&str> {
        self.group_names.get(group_id).map(String::as_str)
    }
}

/// Parses gold JSON; `version_id` names the version regardless of the file.
pub fn parse_gold(json: &str, version_id: &str) -> Result<GoldAnnotations, CorpusError> {
    let file: GoldFile = serde_json::from_str(json).map_err(|e| CorpusError::GoldSyntax {
        path: version_id.to_string(),
        message: e.to_string(),
    })?;
    let gold = GoldAnnotations {
        version_id: version_id.to_string(),
        findings: file.findings,
        group_names: file.group_names,
        same_report_links: file
            .same_report_links
            .into_iter()
            .map(|(a, b)| if a <= b { (a, b) } else { (b, a) })
            .collect(),
    };
    gold.validate()?;
    Ok(gold)
}

/// Loads a gold file. When `version_id` is `None` the file's own
/// `version_id` is used, then the file stem.
pub fn load_gold(path: &Path, version_id: Option<&str>) -> Result<GoldAnnotations, CorpusError> {
    let json = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let id = match version_id {
        Some(v) => v.to_string(),
        None => serde_json::from_str::<serde_json::Value>(&json)
            .ok()
            .and_then(|v| v.get("version_id").and_then(|s| s.as_str()).map(String::from))
            .unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            }),
    };
    parse_gold(&json, &id).map_err(|e| match e {
        CorpusError::GoldSyntax { message, .. } => CorpusError::GoldSyntax {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

/// Gold findings of one report that share a group, concatenated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedFinding {
    pub report_id: String,
    pub group_id: String,
    pub text: String,
    pub finding_ids: Vec<String>,
}

pub const MERGE_SEPARATOR: &str = "; ";

/// Merges findings that share `(report_id, group_id)`; member texts are
/// joined in file order and the merged unit sits at its first member's
/// position.
pub fn merged_gold_findings(gold: &GoldAnnotations) -> Vec<MergedFinding> {
    let mut slot: HashMap<(&str, &str), usize> = HashMap::new();
    let mut out: Vec<MergedFinding> = Vec::new();
    for f in &gold.findings {
        let key = (f.report_id.as_str(), f.group_id.as_str());
        match slot.get(&key) {
            Some(&i) => {
                let m = &mut out[i];
                m.text.push_str(MERGE_SEPARATOR);
                m.text.push_str(&f.text);
                m.finding_ids.push(f.finding_id.clone());
            }
            None => {
                slot.insert(key, out.len());
                out.push(MergedFinding {
                    report_id: f.report_id.clone(),
                    group_id: f.group_id.clone(),
                    text: f.text.clone(),
                    finding_ids: vec![f.finding_id.clone()],
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "patient_id,report_id,date,note_tag,QOClassificationName,ReportText\n";

    #[test]
    fn two_rows_sorted_by_date() {
        let csv = format!(
            "{HEADER}p1,r2,2020-05-01,chest_ct,CT Chest,\"second\"\np1,r1,2019-01-03,chest_xr,XR Chest,first\n"
        );
        let c = parse_corpus(csv.as_bytes()).unwrap();
        assert_eq!(c.patients.len(), 1);
        let ids: Vec<_> = c.patients[0].reports.iter().map(|r| r.report_id.as_str()).collect();
        assert_eq!(ids, ["r1", "r2"]);
    }

    #[test]
    fn ties_broken_by_report_id() {
        let csv = format!("{HEADER}p1,rb,2020-05-01,ct,CT,x\np1,ra,2020-05-01,ct,CT,y\np2,rc,2020-01-01,ct,CT,z\n");
        let c = parse_corpus(csv.as_bytes()).unwrap();
        assert_eq!(c.patients.len(), 2);
        assert_eq!(c.patients[0].reports[0].report_id, "ra");
        assert_eq!(c.patient("p2").unwrap().reports.len(), 1);
    }

    #[test]
    fn quoted_newline_preserved() {
        let csv = format!("{HEADER}p1,r1,2020-05-01,ct,CT,\"line one\nline \"\"two\"\"\"\n");
        let c = parse_corpus(csv.as_bytes()).unwrap();
        assert_eq!(c.patients[0].reports[0].text, "line one\nline \"two\"");
    }

    #[test]
    fn invalid_month_names_row() {
        let csv = format!("{HEADER}p1,r1,2020-01-01,ct,CT,a\np1,r2,2020-13-01,ct,CT,b\n");
        match parse_corpus(csv.as_bytes()) {
            Err(CorpusError::BadDate { row, value }) => {
                assert_eq!(row, 2);
                assert_eq!(value, "2020-13-01");
            }
            other => panic!("expected BadDate, got {other:?}"),
        }
    }

    #[test]
    fn time_of_day_truncated() {
        assert_eq!(parse_date("2021-03-04T10:11:12"), NaiveDate::from_ymd_opt(2021, 3, 4));
        assert_eq!(parse_date("2021-03-04 10:11"), NaiveDate::from_ymd_opt(2021, 3, 4));
        assert_eq!(parse_date("2021-03-04x"), None);
        assert_eq!(parse_date("2021-3-4"), None);
    }

    #[test]
    fn duplicate_report_rejected() {
        let csv = format!("{HEADER}p1,r1,2020-01-01,ct,CT,a\np2,r1,2020-01-02,ct,CT,b\n");
        assert!(matches!(
            parse_corpus(csv.as_bytes()),
            Err(CorpusError::DuplicateReport { row: 2, .. })
        ));
    }

    #[test]
    fn malformed_row_reports_index() {
        let csv = format!("{HEADER}p1,r1,2020-01-01,ct,CT,a\np1,r2,2020-01-01\n");
        assert!(matches!(
            parse_corpus(csv.as_bytes()),
            Err(CorpusError::MalformedRow { row: 2, .. })
        ));
    }

    #[test]
    fn missing_column_rejected() {
        let csv = "patient_id,report_id,date,note_tag,ReportText\np,r,2020-01-01,ct,x\n";
        assert!(matches!(
            parse_corpus(csv.as_bytes()),
            Err(CorpusError::MissingColumn(c)) if c == "QOClassificationName"
        ));
    }

    #[test]
    fn empty_text_rejected() {
        let csv = format!("{HEADER}p1,r1,2020-01-01,ct,CT,\"  \"\n");
        assert!(matches!(
            parse_corpus(csv.as_bytes()),
            Err(CorpusError::EmptyText { row: 1 })
        ));
    }

    fn gold_json(links: &str) -> String {
        format!(
            r#"{{"version_id":"x","findings":[
                {{"finding_id":"f1","report_id":"r1","text":"a","group_id":"g1"}},
                {{"finding_id":"f2","report_id":"r1","text":"b","group_id":"g1"}},
                {{"finding_id":"f3","report_id":"r2","text":"c","group_id":"g2"}}],
              "group_names":{{"g1":"one","g2":"two"}},
              "same_report_links":[{links}]}}"#
        )
    }

    #[test]
    fn gold_counts() {
        let g = parse_gold(&gold_json(r#"["f2","f1"]"#), "ann1").unwrap();
        assert_eq!(g.findings.len(), 3);
        assert_eq!(g.group_names.len(), 2);
        assert!(g.same_report_links.contains(&("f1".into(), "f2".into())));
    }

    #[test]
    fn cross_report_link_rejected() {
        let err = parse_gold(&gold_json(r#"["f1","f3"]"#), "ann1").unwrap_err();
        assert!(matches!(err, CorpusError::BadLink { .. }));
    }

    #[test]
    fn dangling_group_and_duplicate_id_rejected() {
        let dangling =
            r#"{"findings":[{"finding_id":"f1","report_id":"r1","text":"a","group_id":"gx"}],"group_names":{}}"#;
        assert!(matches!(
            parse_gold(dangling, "v"),
            Err(CorpusError::DanglingGroup { .. })
        ));
        let dup = r#"{"findings":[{"finding_id":"f1","report_id":"r1","text":"a","group_id":"g"},
                                 {"finding_id":"f1","report_id":"r2","text":"b","group_id":"g"}],
                     "group_names":{"g":"n"}}"#;
        assert!(matches!(
            parse_gold(dup, "v"),
            Err(CorpusError::DuplicateFinding { .. })
        ));
    }

    #[test]
    fn versions_are_distinct() {
        let a = parse_gold(&gold_json(""), "ann1").unwrap();
        let b = parse_gold(&gold_json(""), "ann2").unwrap();
        assert_ne!(a, b);
        assert_eq!(a.findings, b.findings);
    }

    #[test]
    fn merge_same_report_same_group() {
        let g = parse_gold(&gold_json(""), "v").unwrap();
        let m = merged_gold_findings(&g);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].text, "a; b");
        assert_eq!(m[0].finding_ids, ["f1", "f2"]);
        assert_eq!(m[1].text, "c");
    }

    #[test]
    fn merge_keeps_different_groups_apart() {
        let json = r#"{"findings":[
            {"finding_id":"f1","report_id":"r1","text":"a","group_id":"g1"},
            {"finding_id":"f2","report_id":"r1","text":"b","group_id":"g2"}],
            "group_names":{"g1":"one","g2":"two"}}"#;
        let m = merged_gold_findings(&parse_gold(json, "v").unwrap());
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].text.as_str(), m[1].text.as_str()), ("a", "b"));
    }

    #[test]
    fn group_names_keep_file_order() {
        let json = r#"{"findings":[],"group_names":{"z":"last","a":"first"}}"#;
        let g = parse_gold(json, "v").unwrap();
        let ids: Vec<_> = g.group_names.keys().cloned().collect();
        assert_eq!(ids, ["z", "a"]);
    }
}
