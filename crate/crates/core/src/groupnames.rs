//! Step 2: propose interpretable row-header names for a patient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{GoldAnnotations, PatientRecord};
use crate::llm_gateway::{ChatRequest, Gateway, GatewayError, ModelConfig};
use crate::{ParseFailure, StepWarning};

pub const CONTEXT_HEADER: [&str; 4] = ["date", "note_tag", "QOClassificationName", "ReportText"];

const GROUPNAME_INSTRUCTIONS: &str = "Please group the lung-related findings recorded over time (including pleura-related findings) and list the group names.
Each group should contain findings that are essentially the same, even if described differently, as well as findings that evolve into one another over time.
Different findings or findings will not evolve into one another should be in separate groups

Group names should be specific that separate unrelated findings, avoid generic names.
Good group name: right upper lobe ground glass nodule
bad group name: ground glass nodules
Finally give me a list of group names separated by commas ','";

const LIST_MARKER: &str = "list of group names";

#[derive(Debug, Error)]
pub enum GroupNamesError {
    #[error("no findings given for report `{0}` in finding-only context")]
    MissingFindings(String),
    #[error("context mode `{0}` cannot be built from reports")]
    UnsupportedContext(ContextMode),
    #[error("patient `{patient}`: {failure}")]
    Parse { patient: String, failure: ParseFailure },
    #[error("building context: {0}")]
    Context(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Canonical identity of a name: NFC, lowercase, every run of
/// non-alphanumeric characters collapsed to `_`, trimmed of `_`.
pub fn tag(text: &str) -> String {
    let mut out = String::new();
    let mut gap = false;
    for c in text.nfc().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            if gap && !out.is_empty() {
                out.push('_');
            }
            gap = false;
            out.push(c);
        } else {
            gap = true;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupName {
    pub display: String,
    pub tag: String,
}

impl GroupName {
    /// `None` when the display has no alphanumeric content.
    pub fn new(display: impl Into<String>) -> Option<Self> {
        let display = display.into();
        let display = display.trim().to_string();
        let tag = tag(&display);
        (!tag.is_empty()).then_some(Self { display, tag })
    }

    /// A name recovered from a bare tag such as `small_RUL_nodule`.
    pub fn from_tag(raw: &str) -> Option<Self> {
        Self::new(raw.replace('_', " "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    #[default]
    Full,
    FindingOnly,
    /// Names taken from gold annotations rather than generated.
    Gold,
}

impl std::fmt::Display for ContextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ContextMode::Full => "full",
            ContextMode::FindingOnly => "finding_only",
            ContextMode::Gold => "gold",
        })
    }
}

impl std::str::FromStr for ContextMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "finding_only" => Ok(Self::FindingOnly),
            "gold" => Ok(Self::Gold),
            other => Err(format!("unknown context mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupNameList {
    pub patient_id: String,
    pub context_mode: ContextMode,
    pub names: Vec<GroupName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

impl GroupNameList {
    /// Keeps the first name of each tag.
    pub fn new(patient_id: impl Into<String>, context_mode: ContextMode, names: Vec<GroupName>) -> Self {
        let mut seen = std::collections::HashSet::new();
        Self {
            patient_id: patient_id.into(),
            context_mode,
            names: names.into_iter().filter(|n| seen.insert(n.tag.clone())).collect(),
            raw_response: None,
        }
    }

    /// Gold names used by this patient's findings, in gold-file order.
    pub fn from_gold(patient: &PatientRecord, gold: &GoldAnnotations) -> Self {
        let used: std::collections::HashSet<&str> = gold
            .findings
            .iter()
            .filter(|f| patient.report(&f.report_id).is_some())
            .map(|f| f.group_id.as_str())
            .collect();
        let names = gold
            .group_names
            .iter()
            .filter(|(id, _)| used.contains(id.as_str()))
            .filter_map(|(_, name)| GroupName::new(name.as_str()))
            .collect();
        Self::new(patient.patient_id.clone(), ContextMode::Gold, names)
    }

    pub fn tags(&self) -> Vec<&str> {
        self.names.iter().map(|n| n.tag.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// The patient's reports as a CSV block, one row per report in date order.
/// In finding-only mode the report body is replaced by its findings, one
/// per line.
pub fn build_context(
    patient: &PatientRecord,
    mode: ContextMode,
    findings: Option<&BTreeMap<String, Vec<String>>>,
) -> Result<String, GroupNamesError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| GroupNamesError::Context(e.to_string());
    w.write_record(CONTEXT_HEADER).map_err(csv_err)?;
    for r in &patient.reports {
        let body = match mode {
            ContextMode::Full => r.text.clone(),
            ContextMode::FindingOnly => findings
                .and_then(|m| m.get(&r.report_id))
                .ok_or_else(|| GroupNamesError::MissingFindings(r.report_id.clone()))?
                .join("\n"),
            ContextMode::Gold => return Err(GroupNamesError::UnsupportedContext(mode)),
        };
        let date = r.date.format("%Y-%m-%d").to_string();
        w.write_record([date.as_str(), &r.note_tag, &r.classification, &body])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields is utf-8"))
}

pub fn groupname_prompt_text(context: &str) -> String {
    format!("{}:\n\n{GROUPNAME_INSTRUCTIONS}", context.trim_end())
}

pub fn build_groupname_prompt(context: &str, model: &ModelConfig) -> ChatRequest {
    model.request(groupname_prompt_text(context))
}

fn strip_decoration(item: &str) -> &str {
    let mut s = item.trim();
    loop {
        let before = s;
        s = s.trim_start_matches(['-', '*', '\u{2022}', '[', '"', '\'', '`']);
        s = s.trim_end_matches(['*', ']', '"', '\'', '`', '.', ';']);
        // Numbered bullets: "1." or "2)".
        let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 {
            let rest = &s[digits..];
            if let Some(r) = rest.strip_prefix(['.', ')']) {
                if r.starts_with(char::is_whitespace) {
                    s = r;
                }
            }
        }
        s = s.trim();
        if s == before {
            return s;
        }
    }
}

/// Lines after the marker up to the first blank line following content.
fn list_block(response: &str) -> Option<&str> {
    let lower = response.to_lowercase();
    // Byte offsets only line up when lowercasing kept the length.
    if lower.len() != response.len() {
        return None;
    }
    let at = lower.rfind(LIST_MARKER)?;
    let mut rest = &response[at + LIST_MARKER.len()..];
    rest = rest.trim_start_matches([':', '*', ' ', '\t']);
    let mut end = rest.len();
    let mut seen = false;
    let mut offset = 0;
    for line in rest.split_inclusive('\n') {
        if line.trim().is_empty() {
            if seen {
                end = offset;
                break;
            }
        } else {
            seen = true;
        }
        offset += line.len();
    }
    Some(&rest[..end])
}

pub fn parse_groupnames(response: &str) -> Result<Vec<GroupName>, ParseFailure> {
    let block = list_block(response)
        .filter(|b| !b.trim().is_empty())
        .or_else(|| response.lines().rev().find(|l| !l.trim().is_empty()))
        .unwrap_or("");
    let mut seen = std::collections::HashSet::new();
    let names: Vec<GroupName> = block
        .split([',', '\n'])
        .filter_map(|item| GroupName::new(strip_decoration(item)))
        .filter(|n| seen.insert(n.tag.clone()))
        .collect();
    if names.is_empty() {
        Err(ParseFailure::new("group names", response))
    } else {
        Ok(names)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamesConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub context: ContextMode,
}

/// Prompt, chat and parse for one patient. A response with no names after
/// the retry is an error.
pub fn generate_groupnames(
    patient: &PatientRecord,
    findings: Option<&BTreeMap<String, Vec<String>>>,
    cfg: &NamesConfig,
    gateway: &Gateway,
) -> Result<(GroupNameList, Vec<StepWarning>), GroupNamesError> {
    let context = build_context(patient, cfg.context, findings)?;
    let req = build_groupname_prompt(&context, &cfg.model);
    let parsed = gateway.chat_parsed(&req, parse_groupnames)?;
    let mut warnings = Vec::new();
    if parsed.attempts > 1 {
        warnings.push(StepWarning::new(
            "names",
            &patient.patient_id,
            "group names unparseable, retried",
        ));
    }
    let names = parsed.value.map_err(|failure| GroupNamesError::Parse {
        patient: patient.patient_id.clone(),
        failure,
    })?;
    let mut list = GroupNameList::new(patient.patient_id.clone(), cfg.context, names);
    list.raw_response = Some(parsed.raw);
    Ok((list, warnings))
}
