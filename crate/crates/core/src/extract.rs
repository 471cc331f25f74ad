//! Step 1: list the lung findings of each report and drop absent ones.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GoldAnnotations, GoldFinding, Report};
use crate::llm_gateway::{ChatRequest, Gateway, GatewayError, ModelConfig};
use crate::{ParseFailure, StepWarning};

pub const FINDING_LIST_MARKER: &str = "lung_finding_list";

const EXTRACTION_INSTRUCTIONS: &str = "Please list all lung-related findings (including pleura-ralated) from the exam report.
Please use a python list to include the strings of those lung desription.
Each string should include all details related to higher or lower risk, using the same description in the note , especially finding\u{2019}s location, size, trend of change, and shape, density, or other characteristics.
Good  example:
[\"stable 2 mm left upper lobe calcified nodule\", 'left lower lobe opacities']
Now please anwswer:
lung_finding_list =";

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("report `{0}` has empty text")]
    EmptyReport(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Generated,
    Gold,
}

impl Provenance {
    fn is_generated(&self) -> bool {
        *self == Provenance::Generated
    }
}

/// One atomic lung-finding string tied to its source report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub finding_id: String,
    pub report_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Provenance::is_generated")]
    pub provenance: Provenance,
}

impl Finding {
    pub fn generated(report_id: &str, index: usize, text: impl Into<String>) -> Self {
        Self {
            finding_id: format!("{report_id}_{index}"),
            report_id: report_id.to_string(),
            text: text.into(),
            provenance: Provenance::Generated,
        }
    }
}

impl From<&GoldFinding> for Finding {
    fn from(g: &GoldFinding) -> Self {
        Self {
            finding_id: g.finding_id.clone(),
            report_id: g.report_id.clone(),
            text: g.text.clone(),
            provenance: Provenance::Gold,
        }
    }
}

/// The annotated findings of a gold version, keeping their ids.
pub fn gold_findings(gold: &GoldAnnotations) -> Vec<Finding> {
    gold.findings.iter().map(Finding::from).collect()
}

/// Numbers `texts` as `{report_id}_{index}` in order.
pub fn number_findings<S: AsRef<str>>(report_id: &str, texts: &[S]) -> Vec<Finding> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| Finding::generated(report_id, i, t.as_ref()))
        .collect()
}

pub fn extraction_prompt_text(report: &Report) -> String {
    format!("{}:\n\n{EXTRACTION_INSTRUCTIONS}", report.text)
}

pub fn build_extraction_prompt(report: &Report, model: &ModelConfig) -> Result<ChatRequest, ExtractError> {
    if report.text.trim().is_empty() {
        return Err(ExtractError::EmptyReport(report.report_id.clone()));
    }
    Ok(model.request(extraction_prompt_text(report)))
}

// ---------------------------------------------------------------------------
// Finding-list parsing

fn closing_quote(c: char) -> Option<char> {
    match c {
        '"' => Some('"'),
        '\'' => Some('\''),
        '\u{201c}' => Some('\u{201d}'),
        '\u{2018}' => Some('\u{2019}'),
        _ => None,
    }
}

enum Literal {
    Done(String, usize),
    Unterminated,
}

/// Reads a string literal whose opening quote is at `chars[at]`.
fn read_literal(chars: &[char], at: usize) -> Literal {
    let close = closing_quote(chars[at]).expect("caller checked the quote");
    let mut out = String::new();
    let mut i = at + 1;
    while i < chars.len() {
        let c = chars[i];
        if c == '\\' && i + 1 < chars.len() {
            out.push(match chars[i + 1] {
                'n' => '\n',
                't' => '\t',
                'r' => '\r',
                other => other,
            });
            i += 2;
            continue;
        }
        if c == close {
            return Literal::Done(out, i + 1);
        }
        out.push(c);
        i += 1;
    }
    Literal::Unterminated
}

/// Parses the list opening at `chars[open] == '['`. Only string literals,
/// commas, whitespace, `#` comments and ellipses may appear inside.
fn scan_list(chars: &[char], open: usize) -> Option<Vec<String>> {
    let mut items = Vec::new();
    let mut current: Option<String> = None;
    let mut i = open + 1;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ']' => {
                items.extend(current.take());
                return Some(items);
            }
            ',' => {
                items.extend(current.take());
                i += 1;
            }
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '.' | '\u{2026}' => i += 1,
            c if c.is_whitespace() => i += 1,
            'r' | 'u' | 'b' | 'R' | 'U' | 'B' if chars.get(i + 1).is_some_and(|n| closing_quote(*n).is_some()) => {
                i += 1
            }
            c if closing_quote(c).is_some() => match read_literal(chars, i) {
                Literal::Done(s, next) => {
                    // Adjacent literals concatenate, as in Python.
                    current.get_or_insert_with(String::new).push_str(&s);
                    i = next;
                }
                Literal::Unterminated => break,
            },
            _ => return None,
        }
    }
    // Truncated response: accept what was completed.
    items.extend(current.take());
    if items.is_empty() {
        None
    } else {
        Some(items)
    }
}

fn first_list_from(chars: &[char], from: usize) -> Option<Vec<String>> {
    (from..chars.len())
        .filter(|&i| chars[i] == '[')
        .find_map(|i| scan_list(chars, i))
}

/// Extracts the finding strings of a model response.
pub fn parse_list_literals(response: &str) -> Result<Vec<String>, ParseFailure> {
    let chars: Vec<char> = response.chars().collect();
    let lower: Vec<char> = response.chars().flat_map(char::to_lowercase).collect();
    let marker: Vec<char> = FINDING_LIST_MARKER.chars().collect();
    // to_lowercase may change length for exotic characters; fall back to
    // the unmarked search in that case.
    let markers: Vec<usize> = if lower.len() == chars.len() {
        (0..chars.len().saturating_sub(marker.len() - 1))
            .filter(|&i| lower[i..i + marker.len()] == marker[..])
            .map(|i| i + marker.len())
            .collect()
    } else {
        Vec::new()
    };
    let found = markers
        .iter()
        .find_map(|&m| first_list_from(&chars, m))
        .or_else(|| first_list_from(&chars, 0));
    match found {
        Some(items) => Ok(items
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()),
        None => Err(ParseFailure::new("finding list", response)),
    }
}

pub fn parse_finding_list(response: &str, report_id: &str) -> Result<Vec<Finding>, ParseFailure> {
    Ok(number_findings(report_id, &parse_list_literals(response)?))
}

/// Canonical Python-list rendering, the inverse of [`parse_list_literals`].
pub fn render_finding_list<S: AsRef<str>>(texts: &[S]) -> String {
    let items: Vec<String> = texts
        .iter()
        .map(|t| {
            let mut s = String::from("\"");
            for c in t.as_ref().chars() {
                match c {
                    '\\' => s.push_str("\\\\"),
                    '"' => s.push_str("\\\""),
                    '\n' => s.push_str("\\n"),
                    '\t' => s.push_str("\\t"),
                    '\r' => s.push_str("\\r"),
                    c => s.push(c),
                }
            }
            s.push('"');
            s
        })
        .collect();
    format!("[{}]", items.join(", "))
}

// ---------------------------------------------------------------------------
// Absence detection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Core,
    Descriptor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub span: String,
    pub kind: EntityKind,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AbsenceVerdict {
    pub entities: Vec<Entity>,
}

impl AbsenceVerdict {
    fn all_absent<'a>(entities: impl Iterator<Item = &'a Entity>) -> Option<bool> {
        let mut any = false;
        for e in entities {
            any = true;
            if e.present {
                return Some(false);
            }
        }
        any.then_some(true)
    }

    /// Every detected entity is absent (`false` when there are none).
    pub fn only_absent(&self) -> bool {
        Self::all_absent(self.entities.iter()).unwrap_or(false)
    }

    /// Every core entity is absent; `None` when there is no core entity.
    pub fn core_absent(&self) -> Option<bool> {
        Self::all_absent(self.entities.iter().filter(|e| e.kind == EntityKind::Core))
    }
}

/// Labels the entities of a finding as present or absent.
pub trait AbsenceDetector: Send + Sync {
    fn detect(&self, text: &str) -> AbsenceVerdict;
}

pub fn detect_absence(finding: &Finding, detector: &dyn AbsenceDetector) -> AbsenceVerdict {
    detector.detect(&finding.text)
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Term lists driving [`RuleDetector`]. Multi-word entries match token
/// sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub core: Vec<String>,
    pub descriptor: Vec<String>,
    /// Negate entities after the cue up to the clause end or a terminator.
    pub forward_cues: Vec<String>,
    /// Negate entities before the cue back to a comma or terminator.
    pub backward_cues: Vec<String>,
    /// Look like cues but do not negate ("no change in ...").
    pub pseudo_cues: Vec<String>,
    pub terminators: Vec<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            core: words(&[
                "nodule",
                "mass",
                "opacity",
                "lesion",
                "consolidation",
                "effusion",
                "pneumothorax",
                "granuloma",
                "scarring",
                "emphysema",
                "atelectasis",
                "fibrosis",
                "hernia",
            ]),
            descriptor: words(&["lung", "lobe", "pleura", "lingula", "base", "segment"]),
            forward_cues: words(&[
                "no",
                "without",
                "free of",
                "absence of",
                "negative for",
                "resolved",
                "resolution of",
            ]),
            backward_cues: words(&["resolved", "absent"]),
            pseudo_cues: words(&["no change", "no interval change", "no significant change"]),
            terminators: words(&[
                "but", "however", "although", "though", "except", "yet", "which", "whereas",
            ]),
        }
    }
}

/// One term per line; blank lines and `#` comments are skipped.
pub fn parse_term_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

pub fn load_term_list(path: &Path) -> std::io::Result<Vec<String>> {
    Ok(parse_term_list(&std::fs::read_to_string(path)?))
}

/// Does `word` match lexicon `term` up to simple inflection?
fn inflects(word: &str, term: &str) -> bool {
    if word == term {
        return true;
    }
    let Some(rest) = word.strip_prefix(term) else {
        return match term.strip_suffix('y') {
            Some(stem) => word.strip_prefix(stem) == Some("ies"),
            None => match term.strip_suffix('e') {
                Some(stem) => matches!(word.strip_prefix(stem), Some("ar" | "al" | "ilar")),
                None => false,
            },
        };
    };
    match rest {
        "s" | "es" | "al" => true,
        "l" | "e" | "tous" => term.ends_with('a'),
        _ => false,
    }
}

#[derive(Debug, Clone)]
enum Tok {
    Word { text: String, start: usize, end: usize },
    Comma,
}

fn is_clause_break(prev: Option<char>, c: char, next: Option<char>) -> bool {
    match c {
        '!' | '?' | ';' | '\n' => true,
        '.' => !(prev.is_some_and(|p| p.is_ascii_digit()) && next.is_some_and(|n| n.is_ascii_digit())),
        _ => false,
    }
}

fn clauses(text: &str) -> Vec<Vec<Tok>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = vec![Vec::new()];
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c.is_alphanumeric() {
            let start = pos;
            let mut j = i;
            while j < chars.len() && chars[j].1.is_alphanumeric() {
                j += 1;
            }
            let end = chars.get(j).map_or(text.len(), |(p, _)| *p);
            out.last_mut().unwrap().push(Tok::Word {
                text: text[start..end].to_lowercase(),
                start,
                end,
            });
            i = j;
            continue;
        }
        let prev = i.checked_sub(1).map(|k| chars[k].1);
        let next = chars.get(i + 1).map(|x| x.1);
        if is_clause_break(prev, c, next) {
            out.push(Vec::new());
        } else if c == ',' {
            out.last_mut().unwrap().push(Tok::Comma);
        }
        i += 1;
    }
    out.retain(|c| !c.is_empty());
    out
}

struct Hit {
    first: usize,
    last: usize,
}

/// Rule-based default detector: lexicon lookup plus negation-cue scope
/// within a clause.
#[derive(Debug, Clone)]
pub struct RuleDetector {
    lexicon: Lexicon,
    split: SplitLexicon,
}

impl Default for RuleDetector {
    fn default() -> Self {
        Self::new(Lexicon::default())
    }
}

#[derive(Debug, Clone, Default)]
struct SplitLexicon {
    core: Vec<Vec<String>>,
    descriptor: Vec<Vec<String>>,
    forward: Vec<Vec<String>>,
    backward: Vec<Vec<String>>,
    pseudo: Vec<Vec<String>>,
}

fn split_terms(terms: &[String]) -> Vec<Vec<String>> {
    terms
        .iter()
        .map(|t| t.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .collect()
}

impl RuleDetector {
    pub fn new(lexicon: Lexicon) -> Self {
        let split = SplitLexicon {
            core: split_terms(&lexicon.core),
            descriptor: split_terms(&lexicon.descriptor),
            forward: split_terms(&lexicon.forward_cues),
            backward: split_terms(&lexicon.backward_cues),
            pseudo: split_terms(&lexicon.pseudo_cues),
        };
        Self { lexicon, split }
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    /// Word positions (indices into `toks`) where `phrase` matches; the last
    /// phrase word may be inflected when `inflect` is set.
    fn matches(toks: &[Tok], at: usize, phrase: &[String], inflect: bool) -> Option<Hit> {
        let mut idx = at;
        let mut first = None;
        for (k, w) in phrase.iter().enumerate() {
            let Tok::Word { text, .. } = toks.get(idx)? else {
                return None;
            };
            let ok = if inflect && k + 1 == phrase.len() {
                inflects(text, w)
            } else {
                text == w
            };
            if !ok {
                return None;
            }
            first.get_or_insert(idx);
            idx += 1;
        }
        Some(Hit {
            first: first?,
            last: idx - 1,
        })
    }

    fn longest(toks: &[Tok], at: usize, phrases: &[Vec<String>], inflect: bool) -> Option<Hit> {
        phrases
            .iter()
            .filter_map(|p| Self::matches(toks, at, p, inflect))
            .max_by_key(|h| h.last)
    }

    fn is_terminator(&self, tok: &Tok) -> bool {
        matches!(tok, Tok::Word { text, .. } if self.lexicon.terminators.iter().any(|t| t == text))
    }

    fn clause_entities(&self, text: &str, toks: &[Tok]) -> Vec<Entity> {
        // Entities, as (first, last, kind).
        let mut ents: Vec<(usize, usize, EntityKind)> = Vec::new();
        // Cues, as (first, last, forward, backward).
        let mut cues: Vec<(usize, usize, bool, bool)> = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            if let Some(h) = Self::longest(toks, i, &self.split.pseudo, false) {
                i = h.last + 1;
                continue;
            }
            let fwd = Self::longest(toks, i, &self.split.forward, false);
            let bwd = Self::longest(toks, i, &self.split.backward, false);
            if fwd.is_some() || bwd.is_some() {
                let last = fwd.iter().chain(bwd.iter()).map(|h| h.last).max().unwrap();
                cues.push((i, last, fwd.is_some(), bwd.is_some()));
                i = last + 1;
                continue;
            }
            if let Some(h) = Self::longest(toks, i, &self.split.core, true) {
                ents.push((h.first, h.last, EntityKind::Core));
                i = h.last + 1;
                continue;
            }
            if let Some(h) = Self::longest(toks, i, &self.split.descriptor, true) {
                ents.push((h.first, h.last, EntityKind::Descriptor));
                i = h.last + 1;
                continue;
            }
            i += 1;
        }

        let mut absent = vec![false; ents.len()];
        for &(first, last, fwd, bwd) in &cues {
            // Backward window: back to the previous comma or terminator.
            let mut lo = first;
            while lo > 0 && !matches!(toks[lo - 1], Tok::Comma) && !self.is_terminator(&toks[lo - 1]) {
                lo -= 1;
            }
            let behind: Vec<usize> = (0..ents.len())
                .filter(|&e| ents[e].0 >= lo && ents[e].1 < first)
                .collect();
            if bwd && (!fwd || !behind.is_empty()) {
                for e in behind {
                    absent[e] = true;
                }
                continue;
            }
            let mut hi = last + 1;
            while hi < toks.len() && !self.is_terminator(&toks[hi]) {
                hi += 1;
            }
            for (e, ent) in ents.iter().enumerate() {
                if ent.0 > last && ent.1 < hi {
                    absent[e] = true;
                }
            }
        }

        ents.iter()
            .zip(absent)
            .map(|(&(first, last, kind), absent)| {
                let (Tok::Word { start, .. }, Tok::Word { end, .. }) = (&toks[first], &toks[last]) else {
                    unreachable!("entities span words")
                };
                Entity {
                    span: text[*start..*end].to_string(),
                    kind,
                    present: !absent,
                }
            })
            .collect()
    }
}

impl AbsenceDetector for RuleDetector {
    fn detect(&self, text: &str) -> AbsenceVerdict {
        AbsenceVerdict {
            entities: clauses(text)
                .iter()
                .flat_map(|c| self.clause_entities(text, c))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Filtering

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterStrength {
    /// Keep everything.
    Off,
    /// Drop a finding when all of its entities are absent.
    #[default]
    Weak,
    /// Drop a finding when all of its core entities are absent.
    Aggressive,
}

impl std::str::FromStr for FilterStrength {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" | "none" => Ok(Self::Off),
            "weak" => Ok(Self::Weak),
            "aggressive" => Ok(Self::Aggressive),
            other => Err(format!("unknown filter strength `{other}`")),
        }
    }
}

/// Whether a finding with this verdict survives the filter. Findings with
/// no core entity fall back to the weak rule under `Aggressive`.
pub fn keeps(verdict: &AbsenceVerdict, strength: FilterStrength) -> bool {
    match strength {
        FilterStrength::Off => true,
        FilterStrength::Weak => !verdict.only_absent(),
        FilterStrength::Aggressive => match verdict.core_absent() {
            Some(all_absent) => !all_absent,
            None => !verdict.only_absent(),
        },
    }
}

pub fn filter_findings(fs: &[Finding], strength: FilterStrength, detector: &dyn AbsenceDetector) -> Vec<Finding> {
    fs.iter()
        .filter(|f| keeps(&detect_absence(f, detector), strength))
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// Step

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub filter: FilterStrength,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtractOutcome {
    pub report_id: String,
    /// Parsed findings before the absence filter.
    pub unfiltered: Vec<Finding>,
    /// Filtered findings, renumbered after filtering.
    pub findings: Vec<Finding>,
    pub warnings: Vec<StepWarning>,
}

/// Prompt, chat, parse and filter for one report. Reads no other report.
pub fn extract_step(
    report: &Report,
    cfg: &ExtractConfig,
    gateway: &Gateway,
    detector: &dyn AbsenceDetector,
) -> Result<ExtractOutcome, ExtractError> {
    let req = build_extraction_prompt(report, &cfg.model)?;
    let parsed = gateway.chat_parsed(&req, parse_list_literals)?;
    let mut warnings = Vec::new();
    if parsed.attempts > 1 {
        warnings.push(StepWarning::new(
            "extract",
            &report.report_id,
            "finding list unparseable, retried",
        ));
    }
    let texts = parsed.value.unwrap_or_else(|e| {
        warnings.push(
            StepWarning::new(
                "extract",
                &report.report_id,
                "no finding list after retry; report contributes no findings",
            )
            .with_raw(e.raw),
        );
        Vec::new()
    });
    let unfiltered = number_findings(&report.report_id, &texts);
    let kept: Vec<String> = filter_findings(&unfiltered, cfg.filter, detector)
        .into_iter()
        .map(|f| f.text)
        .collect();
    Ok(ExtractOutcome {
        report_id: report.report_id.clone(),
        findings: number_findings(&report.report_id, &kept),
        unfiltered,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn report(text: &str) -> Report {
        Report {
            report_id: "r1".into(),
            patient_id: "p1".into(),
            date: NaiveDate::from_ymd_opt(2020, 5, 1).unwrap(),
            note_tag: "chest_ct".into(),
            classification: "CT Chest".into(),
            text: text.into(),
        }
    }

    fn texts(fs: &[Finding]) -> Vec<&str> {
        fs.iter().map(|f| f.text.as_str()).collect()
    }

    #[test]
    fn prompt_layout() {
        let req = build_extraction_prompt(&report("FINDINGS: 4 mm nodule."), &ModelConfig::new("m")).unwrap();
        let p = req.prompt();
        assert!(p.starts_with(
            "FINDINGS: 4 mm nodule.:\n\nPlease list all lung-related findings (including pleura-ralated)"
        ));
        assert!(p.ends_with("lung_finding_list ="));
        assert!(p.contains("[\"stable 2 mm left upper lobe calcified nodule\", 'left lower lobe opacities']"));
        assert!(matches!(
            build_extraction_prompt(&report("  \n"), &ModelConfig::new("m")),
            Err(ExtractError::EmptyReport(_))
        ));
    }

    #[test]
    fn parses_marker_list() {
        let fs = parse_finding_list("lung_finding_list = [\"a\", 'b c']", "r9").unwrap();
        assert_eq!(texts(&fs), ["a", "b c"]);
        assert_eq!(fs[1].finding_id, "r9_1");
    }

    #[test]
    fn parses_fenced_list_after_prose() {
        let resp = "Here is the list [as requested]:\n\n```python\nlung_finding_list = [\n    \"a\",\n    'b c',  # second\n]\n```\nDone.";
        assert_eq!(parse_list_literals(resp).unwrap(), ["a", "b c"]);
    }

    #[test]
    fn no_list_is_failure() {
        assert!(parse_list_literals("There are no findings.").is_err());
        assert!(parse_list_literals("[see report]").is_err());
    }

    #[test]
    fn empty_list_is_zero_findings() {
        assert!(parse_list_literals("lung_finding_list = []").unwrap().is_empty());
    }

    #[test]
    fn escapes_and_curly_quotes() {
        let r = parse_list_literals(r#"[ "say \"hi\"", 'it\'s', “curly one” ]"#).unwrap();
        assert_eq!(r, ["say \"hi\"", "it's", "curly one"]);
    }

    #[test]
    fn truncated_list_keeps_complete_items() {
        let r = parse_list_literals("lung_finding_list = [\"a\", \"b\", \"c unfinis").unwrap();
        assert_eq!(r, ["a", "b"]);
    }

    #[test]
    fn render_round_trip() {
        let items = ["a \"quoted\" \\ path", "line\nbreak", "it's"];
        assert_eq!(parse_list_literals(&render_finding_list(&items)).unwrap(), items);
    }

    fn verdict(text: &str) -> Vec<(String, EntityKind, bool)> {
        RuleDetector::new(Lexicon::default())
            .detect(text)
            .entities
            .into_iter()
            .map(|e| (e.span, e.kind, e.present))
            .collect()
    }

    #[test]
    fn detector_examples() {
        assert_eq!(
            verdict("no new nodules"),
            vec![("nodules".into(), EntityKind::Core, false)]
        );
        assert_eq!(
            verdict("stable 2 mm nodule in the right upper lobe"),
            vec![
                ("nodule".into(), EntityKind::Core, true),
                ("lobe".into(), EntityKind::Descriptor, true)
            ]
        );
        assert_eq!(
            verdict("Lungs: no masses"),
            vec![
                ("Lungs".into(), EntityKind::Descriptor, true),
                ("masses".into(), EntityKind::Core, false)
            ]
        );
    }

    #[test]
    fn backward_and_pseudo_cues() {
        assert_eq!(
            verdict("right lower lobe opacity has resolved"),
            vec![
                ("lobe".into(), EntityKind::Descriptor, false),
                ("opacity".into(), EntityKind::Core, false)
            ]
        );
        assert_eq!(
            verdict("no change in the 4 mm nodule"),
            vec![("nodule".into(), EntityKind::Core, true)]
        );
        assert_eq!(
            verdict("no effusion but a new nodule"),
            vec![
                ("effusion".into(), EntityKind::Core, false),
                ("nodule".into(), EntityKind::Core, true)
            ]
        );
    }

    #[test]
    fn inflections() {
        assert!(inflects("opacities", "opacity"));
        assert!(inflects("pleural", "pleura"));
        assert!(inflects("nodular", "nodule"));
        assert!(inflects("masses", "mass"));
        assert!(!inflects("massive", "mass"));
    }

    #[test]
    fn filter_strengths() {
        let d = RuleDetector::new(Lexicon::default());
        let fs = number_findings(
            "r",
            &["no new nodules", "Lungs: no masses", "stable nodule", "trachea midline"],
        );
        assert_eq!(
            texts(&filter_findings(&fs, FilterStrength::Weak, &d)),
            ["Lungs: no masses", "stable nodule", "trachea midline"]
        );
        assert_eq!(
            texts(&filter_findings(&fs, FilterStrength::Aggressive, &d)),
            ["stable nodule", "trachea midline"]
        );
        assert_eq!(filter_findings(&fs, FilterStrength::Off, &d).len(), 4);
    }

    #[test]
    fn term_lists() {
        assert_eq!(parse_term_list("# core\nNodule\n\n mass \n"), ["nodule", "mass"]);
    }
}
