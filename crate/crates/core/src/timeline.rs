//! Per-patient timeline grid: one column per exam, one row per group.

use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::Assignment;
use crate::corpus::PatientRecord;
use crate::extract::Finding;
use crate::groupnames::GroupName;
use crate::natural_cmp;

pub const TIMELINE_VERSION: &str = "rtk_timeline_v1";

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("assignment references unknown finding `{0}`")]
    UnknownFinding(String),
    #[error("finding `{0}` has no assignment")]
    Unassigned(String),
    #[error("finding `{0}` is assigned more than once")]
    DuplicateAssignment(String),
    #[error("finding `{finding_id}` refers to report `{report_id}` outside the patient")]
    ForeignReport { finding_id: String, report_id: String },
    #[error("unsupported timeline version `{0}`")]
    Version(String),
    #[error("timeline json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnHeader {
    pub report_id: String,
    pub date: NaiveDate,
    pub note_tag: String,
}

impl ColumnHeader {
    /// `YYYY-MM_note-tag`.
    pub fn label(&self) -> String {
        format!("{}_{}", self.date.format("%Y-%m"), self.note_tag.replace('_', "-"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub group: GroupName,
    /// report_id -> finding texts in finding-id order.
    pub cells: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub version: String,
    pub patient_id: String,
    pub columns: Vec<ColumnHeader>,
    pub rows: Vec<Row>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Timeline {
    pub fn cell(&self, row: usize, report_id: &str) -> &[String] {
        self.rows[row].cells.get(report_id).map_or(&[], Vec::as_slice)
    }

    /// All cell texts, row by row.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.rows
            .iter()
            .flat_map(|r| r.cells.values().flatten().map(String::as_str))
    }
}

type RowDraft<'a> = (&'a GroupName, usize, BTreeMap<String, Vec<String>>);

pub fn assemble(
    patient: &PatientRecord,
    fs: &[Finding],
    assignments: &[Assignment],
) -> Result<Timeline, TimelineError> {
    let columns: Vec<ColumnHeader> = patient
        .reports
        .iter()
        .map(|r| ColumnHeader {
            report_id: r.report_id.clone(),
            date: r.date,
            note_tag: r.note_tag.clone(),
        })
        .collect();
    let col_index: HashMap<&str, usize> = columns
        .iter()
        .enumerate()
        .map(|(i, c)| (c.report_id.as_str(), i))
        .collect();
    let by_id: HashMap<&str, &Finding> = fs.iter().map(|f| (f.finding_id.as_str(), f)).collect();
    let mut group_of: HashMap<&str, &GroupName> = HashMap::new();
    for a in assignments {
        if !by_id.contains_key(a.finding_id.as_str()) {
            return Err(TimelineError::UnknownFinding(a.finding_id.clone()));
        }
        if group_of.insert(a.finding_id.as_str(), &a.group).is_some() {
            return Err(TimelineError::DuplicateAssignment(a.finding_id.clone()));
        }
    }

    let mut ordered: Vec<&Finding> = fs.iter().collect();
    ordered.sort_by(|a, b| natural_cmp(&a.finding_id, &b.finding_id));
    // tag -> (group, first column, cells)
    let mut rows: HashMap<&str, RowDraft> = HashMap::new();
    for f in ordered {
        let g = group_of
            .get(f.finding_id.as_str())
            .ok_or_else(|| TimelineError::Unassigned(f.finding_id.clone()))?;
        let &col = col_index
            .get(f.report_id.as_str())
            .ok_or_else(|| TimelineError::ForeignReport {
                finding_id: f.finding_id.clone(),
                report_id: f.report_id.clone(),
            })?;
        let entry = rows.entry(g.tag.as_str()).or_insert_with(|| (*g, col, BTreeMap::new()));
        entry.1 = entry.1.min(col);
        entry.2.entry(f.report_id.clone()).or_default().push(f.text.clone());
    }
    let mut rows: Vec<(&str, RowDraft)> = rows.into_iter().collect();
    rows.sort_by(|a, b| (a.1).1.cmp(&(b.1).1).then_with(|| a.0.cmp(b.0)));
    Ok(Timeline {
        version: TIMELINE_VERSION.to_string(),
        patient_id: patient.patient_id.clone(),
        columns,
        rows: rows
            .into_iter()
            .map(|(_, (group, _, cells))| Row {
                group: group.clone(),
                cells,
            })
            .collect(),
        config_hash: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Markdown,
    Html,
}

impl Format {
    pub fn extension(&self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Markdown => "md",
            Format::Html => "html",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            "html" => Ok(Self::Html),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

/// Row 0 is the header; column 0 the group names.
fn grid(t: &Timeline, sep: &str) -> Vec<Vec<String>> {
    let mut out = Vec::with_capacity(t.rows.len() + 1);
    let mut header = vec!["group".to_string()];
    header.extend(t.columns.iter().map(ColumnHeader::label));
    out.push(header);
    for (i, row) in t.rows.iter().enumerate() {
        let mut line = vec![row.group.display.clone()];
        line.extend(t.columns.iter().map(|c| t.cell(i, &c.report_id).join(sep)));
        out.push(line);
    }
    out
}

fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn render_csv(t: &Timeline) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for line in grid(t, "; ") {
        w.write_record(&line).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 fields")
}

fn render_markdown(t: &Timeline) -> String {
    let cell = |s: &str| s.replace('|', "\\|").replace('\n', "<br>");
    let g = grid(t, "\u{0}");
    let mut out = String::new();
    for (i, line) in g.iter().enumerate() {
        let cells: Vec<String> = line.iter().map(|c| cell(c).replace('\u{0}', "<br>")).collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
        if i == 0 {
            out.push_str(&format!("|{}\n", "---|".repeat(line.len())));
        }
    }
    out
}

fn render_html(t: &Timeline) -> String {
    let g = grid(t, "\u{0}");
    let cell = |s: &str| html_escape(s).replace(['\n', '\u{0}'], "<br>");
    let mut out = String::from("<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>");
    out.push_str(&html_escape(&t.patient_id));
    out.push_str("</title></head>\n<body>\n<table border=\"1\">\n<thead>\n<tr>");
    for h in &g[0] {
        out.push_str(&format!("<th>{}</th>", cell(h)));
    }
    out.push_str("</tr>\n</thead>\n<tbody>\n");
    for line in &g[1..] {
        out.push_str("<tr>");
        for (i, c) in line.iter().enumerate() {
            let tagname = if i == 0 { "th" } else { "td" };
            out.push_str(&format!("<{tagname}>{}</{tagname}>", cell(c)));
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</tbody>\n</table>\n</body>\n</html>\n");
    out
}

pub fn render(t: &Timeline, format: Format) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(t).expect("timeline serializes");
            s.push('\n');
            s
        }
        Format::Csv => render_csv(t),
        Format::Markdown => render_markdown(t),
        Format::Html => render_html(t),
    }
}

pub fn from_json(json: &str) -> Result<Timeline, TimelineError> {
    let t: Timeline = serde_json::from_str(json)?;
    if t.version != TIMELINE_VERSION {
        return Err(TimelineError::Version(t.version));
    }
    Ok(t)
}
