//! Step 3: map every finding of a patient onto a group name, by prompting
//! (one finding or all findings per call) or by embedding similarity.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::Finding;
use crate::groupnames::{tag, GroupName};
use crate::hungarian::max_weight_matching;
use crate::llm_gateway::{EmbedRequest, Gateway, GatewayError, ModelConfig};
use crate::textmetrics::tokenize;
use crate::{natural_cmp, parallel_map, ParseFailure, StepWarning};

pub const GENERAL_INSTRUCTION: &str = "Given a radiology finding, find the group that it belongs to";
pub const TASK_INSTRUCTION: &str =
    "Represent the radiological findings and be aware of the type and location of the findings";

pub const PLACEHOLDER: &str = "<#>";

#[derive(Debug, Error)]
pub enum AssignError {
    #[error("invalid assignment config: {0}")]
    Config(String),
    #[error("patient `{0}`: group names are required but none were given")]
    NoNames(String),
    #[error("full context requested but no context was supplied")]
    MissingContext,
    #[error("{0}")]
    Embedding(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    #[serde(alias = "single")]
    LlmSingle,
    #[serde(alias = "multiple")]
    LlmMultiple,
    Embed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shots {
    #[default]
    #[serde(alias = "zs")]
    Zero,
    #[serde(alias = "fs")]
    Few,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptContext {
    Full,
    #[default]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupsMode {
    #[default]
    Provided,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instruction {
    #[default]
    General,
    TaskSpecific,
}

macro_rules! from_str_impl {
    ($ty:ty, $($s:literal => $v:expr),+ $(,)?) => {
        impl std::str::FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(format!("unknown value `{other}`")),
                }
            }
        }
    };
}

from_str_impl!(Method, "single" => Method::LlmSingle, "llm_single" => Method::LlmSingle,
    "multiple" => Method::LlmMultiple, "llm_multiple" => Method::LlmMultiple, "embed" => Method::Embed);
from_str_impl!(Shots, "zs" => Shots::Zero, "zero" => Shots::Zero, "fs" => Shots::Few, "few" => Shots::Few);
from_str_impl!(PromptContext, "full" => PromptContext::Full, "none" => PromptContext::None);
from_str_impl!(GroupsMode, "provided" => GroupsMode::Provided, "none" => GroupsMode::None);
from_str_impl!(Instruction, "general" => Instruction::General, "task_specific" => Instruction::TaskSpecific);

fn default_general() -> String {
    GENERAL_INSTRUCTION.to_string()
}

fn default_task() -> String {
    TASK_INSTRUCTION.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub shots: Shots,
    #[serde(default)]
    pub context: PromptContext,
    #[serde(default)]
    pub groups: GroupsMode,
    #[serde(default)]
    pub instruction: Instruction,
    pub model: ModelConfig,
    #[serde(default)]
    pub embed_model: String,
    #[serde(default = "default_general")]
    pub general_instruction: String,
    #[serde(default = "default_task")]
    pub task_instruction: String,
}

impl AssignConfig {
    pub fn new(method: Method, model: ModelConfig) -> Self {
        Self {
            method,
            shots: Shots::Zero,
            context: PromptContext::None,
            groups: GroupsMode::Provided,
            instruction: Instruction::General,
            model,
            embed_model: String::new(),
            general_instruction: default_general(),
            task_instruction: default_task(),
        }
    }

    pub fn validate(&self) -> Result<(), AssignError> {
        if self.groups == GroupsMode::None && self.method != Method::LlmMultiple {
            return Err(AssignError::Config(
                "groups=none is only valid with the multiple method".into(),
            ));
        }
        if self.method == Method::Embed && self.embed_model.trim().is_empty() {
            return Err(AssignError::Config("embed method needs an embedding model".into()));
        }
        if self.method != Method::Embed && self.model.model.trim().is_empty() {
            return Err(AssignError::Config("a chat model is required".into()));
        }
        self.model.decoding.validate().map_err(AssignError::Config)
    }

    fn full_context(&self) -> bool {
        self.context == PromptContext::Full
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Existing,
    OtherFallback,
    Invented,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "AssignmentRecord", into = "AssignmentRecord")]
pub struct Assignment {
    pub finding_id: String,
    pub group: GroupName,
    pub origin: Origin,
}

#[derive(Serialize, Deserialize)]
struct AssignmentRecord {
    finding_id: String,
    group_tag: String,
    group_display: String,
    origin: Origin,
}

impl From<AssignmentRecord> for Assignment {
    fn from(r: AssignmentRecord) -> Self {
        Self {
            finding_id: r.finding_id,
            group: GroupName {
                display: r.group_display,
                tag: r.group_tag,
            },
            origin: r.origin,
        }
    }
}

impl From<Assignment> for AssignmentRecord {
    fn from(a: Assignment) -> Self {
        Self {
            finding_id: a.finding_id,
            group_tag: a.group.tag,
            group_display: a.group.display,
            origin: a.origin,
        }
    }
}

impl Assignment {
    /// The finding becomes its own group, named by its text.
    pub fn other_fallback(f: &Finding) -> Self {
        let t = tag(&f.text);
        Self {
            finding_id: f.finding_id.clone(),
            group: GroupName {
                display: f.text.clone(),
                tag: if t.is_empty() {
                    format!("finding_{}", tag(&f.finding_id))
                } else {
                    t
                },
            },
            origin: Origin::OtherFallback,
        }
    }

    fn to(f: &Finding, group: &GroupName, origin: Origin) -> Self {
        Self {
            finding_id: f.finding_id.clone(),
            group: group.clone(),
            origin,
        }
    }
}

// ---------------------------------------------------------------------------
// Prompts

const GROUP_DEFINITION: &str = "There are groups presented to track the lung-related findings recorded over time.
Each group should contain findings that are essentially the same, even if described differently, as well as findings that evolve into one another over time.
Different findings or findings will not evolve into one another should be in separate groups";

const SINGLE_EXAMPLES: &str = "Here are some examples:

Example 1

Group labels: small RUL nodule, 10 mm right lower lobe nodule, other

Finding to be classified: Small 4 mm right upper lobe nodule stable

Answer: small RUL nodule


Example 2

Group labels: calcified granuloma, right upper lobe nodules, other

Finding to be classified: Benign appearing calcified granuloma in left lung

Answer: calcified_granuloma";

const MULTI_TASK: &str =
    "Your task is to group radiology findings evolving over time from multiple reports of the same patient.";
const MULTI_REPLACE: &str =
    "Please replace every <#> with a group name tag in angle-bracket format, such as <10_mm_right_lower_lobe_nodule>.";
const MULTI_CONSISTENT: &str =
    "Use the same group name tag across all reports for all mentions related to the same underlying entity.";
const MULTI_REPLY: &str = "Please reply with exactly the same lines listed above that are between \u{2018}Radiology Findings\u{2019} and \u{2018}Radiology Findings END\u{2019}, but with the group name tags inserted.";

const MULTI_EXAMPLE_1_TAGS: &str = "Existing group name tags:
<10_mm_right_lower_lobe_nodule> : 10 mm right lower lobe nodule
<small_RUL_nodule> : small RUL nodule
";
const MULTI_EXAMPLE_1: &str = "Radiology Findings:
Small 4 mm right upper lobe nodule is new <#>
The 10 mm right lower lobe groundglass is stable <#>
Here are several left lobe calcified nodules <#>
Small right upper lobe nodule is stable <#>
RLL groundglass is smaller now <#>
Radiology Findings END
Answer:
Small 4 mm right upper lobe nodule is new <small_RUL_nodule>
The 10 mm right lower lobe groundglass is stable <10_mm_right_lower_lobe_nodule>
Here are several left lobe calcified nodules <left_lobe_calcified_nodules>
Small right upper lobe nodule is stable <small_RUL_nodule>
RLL groundglass is smaller now <10_mm_right_lower_lobe_nodule>
";
const MULTI_EXAMPLE_2_TAGS: &str = "Existing group name tags:
<calcified_granuloma> : calcified granuloma
<right_upper_lobe_nodules> : right upper lobe nodules
";
const MULTI_EXAMPLE_2: &str = "Radiology Findings:
Benign appearing calcified granuloma in the left lung <#>
New right upper lobe nodules compared to last scan <#>
A 1.5 cm part-solid nodule is identified in the lingula <#>
Radiology Findings END
Answer:
Benign appearing calcified granuloma in the left lung  <calcified_granuloma>
New right upper lobe nodules compared to last scan <right_upper_lobe_nodules>
A 1.5 cm part-solid nodule is identified in the lingula <part_solid_nodule_in_the_lingula>
";

const RULE: &str = "--------------------------\n";

fn context_block(context: Option<&str>) -> String {
    context.map(|c| format!("{}\n\n", c.trim_end())).unwrap_or_default()
}

fn label_list(names: &[GroupName]) -> String {
    names.iter().map(|n| n.display.as_str()).collect::<Vec<_>>().join(", ")
}

/// One finding, one call. `context` is the longitudinal report block and
/// is only used with full context.
pub fn single_prompt_text(finding: &str, names: &[GroupName], cfg: &AssignConfig, context: Option<&str>) -> String {
    let full = cfg.full_context();
    let labels = label_list(names);
    let mut p = if full { context_block(context) } else { String::new() };
    p.push_str("Please find  the group best describing this finding  given the ");
    if full {
        p.push_str("radiology exam history and ");
    }
    p.push_str("group labels.\n\n");
    p.push_str(GROUP_DEFINITION);
    p.push_str("\n\n");
    match cfg.shots {
        Shots::Zero => {
            p.push_str(&format!(
                "The group labels are:\n{labels}, other\nThe finding to be classified is: {finding}\n\nGive me the group in the last line starting with 'Answer:'."
            ));
        }
        Shots::Few => {
            p.push_str(SINGLE_EXAMPLES);
            p.push_str(&format!(
                "\n\n\n\nYour task:\n\nGroup labels:  {labels}, other\n\nFinding to be classified: {finding}\n\nYour explain: [EXPLAIN WHY]\n\nAnswer: [GROUP_NAME CHOICE ]\n\nAlways end with \"Answer: [GROUP_NAME]\" as the very last line"
            ));
        }
    }
    p
}

fn finding_line(text: &str) -> String {
    let flat: Vec<&str> = text.split_whitespace().collect();
    format!("{} {PLACEHOLDER}", flat.join(" "))
}

/// All findings of a patient, one call. `names` is `None` for the variant
/// where the model invents every tag.
pub fn multiple_prompt_text(
    findings: &[&str],
    names: Option<&[GroupName]>,
    cfg: &AssignConfig,
    context: Option<&str>,
) -> String {
    let full = cfg.full_context();
    let mut p = if full { context_block(context) } else { String::new() };
    p.push_str("Task:\n");
    p.push_str(MULTI_TASK);
    if full {
        p.push_str(" Those reports are as given above.");
    }
    p.push('\n');
    p.push_str(MULTI_REPLACE);
    p.push('\n');
    p.push_str(match names {
        Some(_) => "You can use either an existing group tag as provided, or invent your own.",
        None => "You should invent your own group tags so that each tag is representative for its associated group.",
    });
    p.push('\n');
    p.push_str(MULTI_CONSISTENT);
    p.push_str("\n\n");
    if cfg.shots == Shots::Few {
        let with_tags = names.is_some();
        p.push_str("Here are examples:\n");
        p.push_str(RULE);
        p.push_str("Example 1\n");
        if with_tags {
            p.push_str(MULTI_EXAMPLE_1_TAGS);
        }
        p.push_str(MULTI_EXAMPLE_1);
        p.push_str(RULE);
        p.push_str("Example 2\n");
        if with_tags {
            p.push_str(MULTI_EXAMPLE_2_TAGS);
        }
        p.push_str(MULTI_EXAMPLE_2);
        p.push_str(RULE);
        p.push('\n');
    }
    p.push_str("Your Task:\n\n");
    if let Some(names) = names {
        let tags: Vec<&str> = names.iter().map(|n| n.tag.as_str()).collect();
        p.push_str(&format!("Existing group name tags:\n{}\n\n", tags.join(", ")));
    }
    p.push_str("Radiology Findings:\n");
    for f in findings {
        p.push_str(&finding_line(f));
        p.push('\n');
    }
    p.push_str("\nRadiology Findings END\n\n");
    match names {
        Some(_) => {
            p.push_str("If an existing group name tag fits, use it;\n");
            p.push_str(
                "If multiple existing tags fit, choose one and apply it consistently to all members of the group.\n",
            );
            p.push_str("If no existing group name fits, invent your own group tag.\n");
            p.push_str(MULTI_REPLY);
            p.push_str("\nAnswer:");
        }
        None => {
            p.push_str("Please apply a group name tag consistently to all members of the group.\n\n");
            p.push_str(MULTI_REPLY);
        }
    }
    p
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SingleAnswer {
    /// Index into the provided names.
    Name(usize),
    Other,
}

/// Start offsets (in the tag-normalized line) where `needle` occurs on
/// `_` boundaries.
fn tag_occurrences(hay: &str, needle: &str) -> Vec<usize> {
    let mut out = Vec::new();
    if needle.is_empty() {
        return out;
    }
    let mut from = 0;
    while let Some(pos) = hay[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let left_ok = start == 0 || hay.as_bytes()[start - 1] == b'_';
        let right_ok = end == hay.len() || hay.as_bytes()[end] == b'_';
        if left_ok && right_ok {
            out.push(start);
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    out
}

/// Reads the choice from the last non-empty line: the provided name that
/// starts earliest wins (ties go to the longer name); a bare "other" before
/// any name means Other.
pub fn parse_single_answer(response: &str, names: &[GroupName]) -> Result<SingleAnswer, ParseFailure> {
    let line = response.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    let hay = tag(line);
    let mut best: Option<(usize, usize, usize)> = None;
    for (i, n) in names.iter().enumerate() {
        if let Some(&start) = tag_occurrences(&hay, &n.tag).first() {
            let cand = (start, n.tag.len(), i);
            best = match best {
                Some(b) if b.0 < cand.0 || (b.0 == cand.0 && b.1 >= cand.1) => Some(b),
                _ => Some(cand),
            };
        }
    }
    let other = tag_occurrences(&hay, "other").into_iter().next();
    match (best, other) {
        (Some((start, _, _)), Some(o)) if o < start => Ok(SingleAnswer::Other),
        (Some((_, _, i)), _) => Ok(SingleAnswer::Name(i)),
        (None, Some(_)) => Ok(SingleAnswer::Other),
        (None, None) => Err(ParseFailure::new("single answer", response)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedLine {
    /// The line with its tag removed.
    pub text: String,
    /// Tag content as written, without brackets.
    pub raw_tag: String,
}

fn first_tag(line: &str) -> Option<(usize, usize, &str)> {
    let mut from = 0;
    while let Some(open) = line[from..].find('<').map(|p| p + from) {
        let close = line[open + 1..].find(['>', '<']).map(|p| p + open + 1)?;
        if line.as_bytes()[close] == b'<' {
            from = close;
            continue;
        }
        let inner = line[open + 1..close].trim();
        if inner != "#" && !tag(inner).is_empty() {
            return Some((open, close + 1, inner));
        }
        from = close + 1;
    }
    None
}

/// Response lines carrying a `<tag>`, in response order.
pub fn parse_tagged_lines(response: &str) -> Vec<TaggedLine> {
    response
        .lines()
        .filter_map(|line| {
            let (start, end, inner) = first_tag(line)?;
            let text = format!("{}{}", &line[..start], &line[end..]).replace(PLACEHOLDER, "");
            Some(TaggedLine {
                text: text.trim().to_string(),
                raw_tag: inner.to_string(),
            })
        })
        .collect()
}

fn token_set(text: &str) -> HashSet<String> {
    tokenize(text).tokens().iter().cloned().collect()
}

fn dice(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

/// Pairs each finding with a response line: by position when the counts
/// agree and positional pairing is already optimal, otherwise by the
/// assignment maximizing total token overlap. Pairs without overlap are
/// dropped.
pub fn pair_lines<F: AsRef<str>, L: AsRef<str>>(findings: &[F], lines: &[L]) -> Vec<Option<usize>> {
    let fs: Vec<HashSet<String>> = findings.iter().map(|f| token_set(f.as_ref())).collect();
    let ls: Vec<HashSet<String>> = lines.iter().map(|l| token_set(l.as_ref())).collect();
    let sim: Vec<Vec<f64>> = fs.iter().map(|f| ls.iter().map(|l| dice(f, l)).collect()).collect();
    let (pairs, best) = max_weight_matching(&sim, ls.len());
    if fs.len() == ls.len() {
        let diagonal: f64 = (0..fs.len()).map(|i| sim[i][i]).sum();
        if (0..fs.len()).all(|i| sim[i][i] > 0.0) && diagonal >= best - 1e-9 {
            return (0..fs.len()).map(Some).collect();
        }
    }
    let mut out = vec![None; fs.len()];
    for (f, l) in pairs {
        if sim[f][l] > 0.0 {
            out[f] = Some(l);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Assignment

/// Result of assigning one patient's findings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssignOutcome {
    pub assignments: Vec<Assignment>,
    /// Row headers actually used, see [`finalize_groups`].
    pub groups: Vec<GroupName>,
    pub warnings: Vec<StepWarning>,
}

pub fn assign_single(
    finding: &Finding,
    names: &[GroupName],
    cfg: &AssignConfig,
    context: Option<&str>,
    gateway: &Gateway,
) -> Result<(Assignment, Vec<StepWarning>), AssignError> {
    if names.is_empty() {
        return Err(AssignError::NoNames(finding.report_id.clone()));
    }
    let req = cfg
        .model
        .request(single_prompt_text(&finding.text, names, cfg, context));
    let parsed = gateway.chat_parsed(&req, |r| parse_single_answer(r, names))?;
    let mut warnings = Vec::new();
    if parsed.attempts > 1 {
        warnings.push(StepWarning::new(
            "assign",
            &finding.finding_id,
            "answer unparseable, retried",
        ));
    }
    let a = match parsed.value {
        Ok(SingleAnswer::Name(i)) => Assignment::to(finding, &names[i], Origin::Existing),
        Ok(SingleAnswer::Other) => Assignment::other_fallback(finding),
        Err(e) => {
            warnings.push(
                StepWarning::new(
                    "assign",
                    &finding.finding_id,
                    "no group in answer after retry; using finding text",
                )
                .with_raw(e.raw),
            );
            Assignment::other_fallback(finding)
        }
    };
    Ok((a, warnings))
}

fn resolve_tag(raw: &str, provided: &HashMap<String, &GroupName>, finding: &Finding) -> Assignment {
    let t = tag(raw);
    match provided.get(&t) {
        Some(n) => Assignment::to(finding, n, Origin::Existing),
        None => match GroupName::from_tag(raw) {
            Some(g) => Assignment::to(finding, &g, Origin::Invented),
            None => Assignment::other_fallback(finding),
        },
    }
}

pub fn assign_multiple(
    fs: &[Finding],
    names: Option<&[GroupName]>,
    cfg: &AssignConfig,
    context: Option<&str>,
    gateway: &Gateway,
) -> Result<(Vec<Assignment>, Vec<StepWarning>), AssignError> {
    if fs.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let texts: Vec<&str> = fs.iter().map(|f| f.text.as_str()).collect();
    let req = cfg.model.request(multiple_prompt_text(&texts, names, cfg, context));
    let parsed = gateway.chat_parsed(&req, |r| {
        let lines = parse_tagged_lines(r);
        if lines.is_empty() {
            Err(ParseFailure::new("tagged findings", r))
        } else {
            Ok(lines)
        }
    })?;
    let subject = &fs[0].report_id;
    let mut warnings = Vec::new();
    if parsed.attempts > 1 {
        warnings.push(StepWarning::new("assign", subject, "no tagged lines, retried"));
    }
    let lines = parsed.value.unwrap_or_default();
    let provided: HashMap<String, &GroupName> = names.unwrap_or_default().iter().map(|n| (n.tag.clone(), n)).collect();
    let line_texts: Vec<&str> = lines.iter().map(|l| l.text.as_str()).collect();
    let pairing = pair_lines(&texts, &line_texts);
    let assignments = fs
        .iter()
        .zip(pairing)
        .map(|(f, line)| match line {
            Some(l) => resolve_tag(&lines[l].raw_tag, &provided, f),
            None => {
                warnings.push(
                    StepWarning::new("assign", &f.finding_id, "finding not recovered from tagged response")
                        .with_raw(parsed.raw.clone()),
                );
                Assignment::other_fallback(f)
            }
        })
        .collect();
    Ok((assignments, warnings))
}

pub fn instructed(instruction: &str, text: &str) -> String {
    format!("Instruct: {instruction}\nQuery: {text}")
}

/// Embedding inputs for findings and names under `instruction`.
pub fn embed_inputs(fs: &[Finding], names: &[GroupName], cfg: &AssignConfig) -> (Vec<String>, Vec<String>) {
    match cfg.instruction {
        Instruction::General => (
            fs.iter()
                .map(|f| instructed(&cfg.general_instruction, &f.text))
                .collect(),
            names.iter().map(|n| n.display.clone()).collect(),
        ),
        Instruction::TaskSpecific => (
            fs.iter().map(|f| instructed(&cfg.task_instruction, &f.text)).collect(),
            names
                .iter()
                .map(|n| instructed(&cfg.task_instruction, &n.display))
                .collect(),
        ),
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Relative slack under which two cosines count as tied, so rounding
/// cannot flip a tie when vectors are rescaled.
const TIE_EPS: f64 = 1e-12;

/// For each finding vector, the index of the most similar name vector;
/// ties (within rounding) go to the earliest name.
pub fn nearest_names(findings: &[Vec<f64>], names: &[Vec<f64>]) -> Result<Vec<usize>, AssignError> {
    if names.is_empty() {
        return Err(AssignError::Embedding("no name vectors".into()));
    }
    let dim = names[0].len();
    if let Some(bad) = names.iter().chain(findings).find(|v| v.len() != dim) {
        return Err(AssignError::Gateway(GatewayError::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        }));
    }
    Ok(findings
        .iter()
        .map(|f| {
            let mut best = (0, cosine(f, &names[0]));
            for (j, n) in names.iter().enumerate().skip(1) {
                let s = cosine(f, n);
                if s > best.1 + TIE_EPS * best.1.abs().max(1.0) {
                    best = (j, s);
                }
            }
            best.0
        })
        .collect())
}

pub fn assign_embed(
    fs: &[Finding],
    names: &[GroupName],
    cfg: &AssignConfig,
    gateway: &Gateway,
) -> Result<Vec<Assignment>, AssignError> {
    if fs.is_empty() {
        return Ok(Vec::new());
    }
    if names.is_empty() {
        return Err(AssignError::NoNames(fs[0].report_id.clone()));
    }
    let (finding_inputs, name_inputs) = embed_inputs(fs, names, cfg);
    let mut inputs = finding_inputs;
    inputs.extend(name_inputs);
    let vectors = gateway.embed(&EmbedRequest {
        model: cfg.embed_model.clone(),
        inputs,
    })?;
    let (fv, nv) = vectors.split_at(fs.len());
    let fv: Vec<Vec<f64>> = fv.iter().map(|e| e.vector.clone()).collect();
    let nv: Vec<Vec<f64>> = nv.iter().map(|e| e.vector.clone()).collect();
    let picks = nearest_names(&fv, &nv)?;
    Ok(fs
        .iter()
        .zip(picks)
        .map(|(f, j)| Assignment::to(f, &names[j], Origin::Embed))
        .collect())
}

/// Used provided names in provided order, then invented and fallback
/// names in first-use order; one entry per tag.
pub fn finalize_groups(assignments: &[Assignment], provided: &[GroupName]) -> Vec<GroupName> {
    let used: HashSet<&str> = assignments.iter().map(|a| a.group.tag.as_str()).collect();
    let mut seen = HashSet::new();
    let mut out: Vec<GroupName> = provided
        .iter()
        .filter(|n| used.contains(n.tag.as_str()) && seen.insert(n.tag.clone()))
        .cloned()
        .collect();
    for a in assignments {
        if seen.insert(a.group.tag.clone()) {
            out.push(a.group.clone());
        }
    }
    out
}

/// Step 3 for one patient. Assignments come back ordered by finding id.
pub fn assign_patient(
    fs: &[Finding],
    names: Option<&[GroupName]>,
    context: Option<&str>,
    cfg: &AssignConfig,
    gateway: &Gateway,
) -> Result<AssignOutcome, AssignError> {
    cfg.validate()?;
    if fs.is_empty() {
        return Ok(AssignOutcome::default());
    }
    if cfg.full_context() && cfg.method != Method::Embed && context.is_none() {
        return Err(AssignError::MissingContext);
    }
    let provided: &[GroupName] = match cfg.groups {
        GroupsMode::Provided => names.ok_or_else(|| AssignError::NoNames(fs[0].report_id.clone()))?,
        GroupsMode::None => &[],
    };
    let (mut assignments, warnings) = match cfg.method {
        Method::LlmSingle => {
            let results = parallel_map(fs, gateway.max_in_flight(), |f| {
                assign_single(f, provided, cfg, context, gateway)
            });
            let mut all = Vec::with_capacity(fs.len());
            let mut warnings = Vec::new();
            for r in results {
                let (a, w) = r?;
                all.push(a);
                warnings.extend(w);
            }
            (all, warnings)
        }
        Method::LlmMultiple => {
            let names = (cfg.groups == GroupsMode::Provided).then_some(provided);
            assign_multiple(fs, names, cfg, context, gateway)?
        }
        Method::Embed => (assign_embed(fs, provided, cfg, gateway)?, Vec::new()),
    };
    let groups = finalize_groups(&assignments, provided);
    assignments.sort_by(|a, b| natural_cmp(&a.finding_id, &b.finding_id));
    Ok(AssignOutcome {
        assignments,
        groups,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::number_findings;

    fn names(list: &[&str]) -> Vec<GroupName> {
        list.iter().map(|n| GroupName::new(*n).unwrap()).collect()
    }

    fn cfg(method: Method) -> AssignConfig {
        AssignConfig::new(method, ModelConfig::new("m"))
    }

    #[test]
    fn config_rules() {
        let mut c = cfg(Method::LlmSingle);
        c.groups = GroupsMode::None;
        assert!(c.validate().is_err());
        c.method = Method::LlmMultiple;
        assert!(c.validate().is_ok());
        let mut e = cfg(Method::Embed);
        assert!(e.validate().is_err());
        e.embed_model = "emb".into();
        assert!(e.validate().is_ok());
    }

    #[test]
    fn single_answer_examples() {
        let n = names(&["Right upper lobe ground glass nodule", "Emphysema"]);
        assert_eq!(
            parse_single_answer("Reasoning.\nAnswer: Right upper lobe ground glass nodule", &n).unwrap(),
            SingleAnswer::Name(0)
        );
        assert_eq!(parse_single_answer("Answer: other", &n).unwrap(), SingleAnswer::Other);
        assert_eq!(
            parse_single_answer("Answer: Emphysema or Right upper lobe ground glass nodule", &n).unwrap(),
            SingleAnswer::Name(1)
        );
        assert!(parse_single_answer("Answer: pneumothorax", &n).is_err());
    }

    #[test]
    fn single_answer_prefers_longest_at_same_start() {
        let n = names(&["nodule", "nodule in lingula"]);
        assert_eq!(
            parse_single_answer("Answer: nodule_in_lingula", &n).unwrap(),
            SingleAnswer::Name(1)
        );
        // "nodules" is not the name "nodule".
        assert!(parse_single_answer("Answer: nodules", &n).is_err());
    }

    #[test]
    fn other_mentioned_after_name() {
        let n = names(&["Emphysema"]);
        assert_eq!(
            parse_single_answer("Answer: Emphysema, not other", &n).unwrap(),
            SingleAnswer::Name(0)
        );
    }

    #[test]
    fn tagged_lines() {
        let lines =
            parse_tagged_lines("Answer:\nSmall right upper lobe nodule is stable <small_RUL_nodule>\nno tag <#>\n");
        assert_eq!(
            lines,
            vec![TaggedLine {
                text: "Small right upper lobe nodule is stable".into(),
                raw_tag: "small_RUL_nodule".into()
            }]
        );
        assert_eq!(parse_tagged_lines("a < b <x>")[0].raw_tag, "x");
    }

    #[test]
    fn pairing_by_order_and_by_overlap() {
        let fs = ["left nodule", "right effusion", "emphysema"];
        assert_eq!(pair_lines(&fs, &fs), vec![Some(0), Some(1), Some(2)]);
        let shuffled = ["emphysema", "left nodule", "right effusion"];
        assert_eq!(pair_lines(&fs, &shuffled), vec![Some(1), Some(2), Some(0)]);
        let missing = ["right effusion", "emphysema"];
        assert_eq!(pair_lines(&fs, &missing), vec![None, Some(0), Some(1)]);
    }

    #[test]
    fn single_prompt_variants() {
        let n = names(&["A nodule", "B opacity"]);
        let mut c = cfg(Method::LlmSingle);
        let zs = single_prompt_text("x", &n, &c, Some("CTX"));
        assert!(zs.starts_with("Please find  the group best describing this finding  given the group labels."));
        assert!(zs.contains("The group labels are:\nA nodule, B opacity, other\nThe finding to be classified is: x"));
        assert!(zs.ends_with("Give me the group in the last line starting with 'Answer:'."));
        c.shots = Shots::Few;
        c.context = PromptContext::Full;
        let fs = single_prompt_text("x", &n, &c, Some("CTX\n"));
        assert!(fs.starts_with("CTX\n\nPlease find  the group best describing this finding  given the radiology exam history and group labels."));
        assert!(fs.contains("Answer: calcified_granuloma"));
        assert!(fs.ends_with("Always end with \"Answer: [GROUP_NAME]\" as the very last line"));
    }

    #[test]
    fn multiple_prompt_variants() {
        let n = names(&["A nodule"]);
        let mut c = cfg(Method::LlmMultiple);
        let p = multiple_prompt_text(&["f one", "f\ntwo"], Some(&n), &c, None);
        assert!(p.starts_with("Task:\nYour task is to group"));
        assert!(p.contains("Existing group name tags:\na_nodule\n\nRadiology Findings:\nf one <#>\nf two <#>\n\nRadiology Findings END"));
        assert!(p.ends_with("with the group name tags inserted.\nAnswer:"));
        assert!(!p.contains("Example 1"));
        c.shots = Shots::Few;
        let p = multiple_prompt_text(&["f"], None, &c, None);
        assert!(p.contains("You should invent your own group tags"));
        assert!(p.contains("Example 1\nRadiology Findings:"));
        assert!(!p.contains("Existing group name tags"));
    }

    #[test]
    fn nearest_name_rules() {
        let names = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(nearest_names(&[vec![0.0, 2.0]], &names).unwrap(), vec![1]);
        assert_eq!(nearest_names(&[vec![1.0, 1.0]], &names).unwrap(), vec![0]);
        assert_eq!(nearest_names(&[vec![0.0, 0.0]], &names).unwrap(), vec![0]);
        assert!(nearest_names(&[vec![1.0]], &names).is_err());
    }

    #[test]
    fn embed_instruction_placement() {
        let fs = number_findings("r", &["nodule"]);
        let n = names(&["Nodule"]);
        let mut c = cfg(Method::Embed);
        let (f, g) = embed_inputs(&fs, &n, &c);
        assert_eq!(
            f,
            ["Instruct: Given a radiology finding, find the group that it belongs to\nQuery: nodule"]
        );
        assert_eq!(g, ["Nodule"]);
        c.instruction = Instruction::TaskSpecific;
        let (f, g) = embed_inputs(&fs, &n, &c);
        assert!(f[0].starts_with("Instruct: Represent the radiological findings"));
        assert!(g[0].starts_with("Instruct: Represent the radiological findings"));
    }

    #[test]
    fn finalize_rules() {
        let provided = names(&["A", "B", "C"]);
        let fs = number_findings("r", &["x", "y", "x", "z"]);
        let assignments = vec![
            Assignment::other_fallback(&fs[0]),
            Assignment::to(&fs[1], &provided[1], Origin::Existing),
            Assignment::other_fallback(&fs[2]),
            Assignment::to(&fs[3], &GroupName::from_tag("new_tag").unwrap(), Origin::Invented),
        ];
        let out = finalize_groups(&assignments, &provided);
        let displays: Vec<&str> = out.iter().map(|n| n.display.as_str()).collect();
        assert_eq!(displays, ["B", "x", "new tag"]);
        assert!(finalize_groups(&[], &provided).is_empty());
    }

    #[test]
    fn assignment_json_shape() {
        let f = number_findings("r", &["x"]);
        let a = Assignment::other_fallback(&f[0]);
        let v = serde_json::to_value(&a).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"finding_id":"r_0","group_tag":"x","group_display":"x","origin":"other_fallback"})
        );
        assert_eq!(serde_json::from_value::<Assignment>(v).unwrap(), a);
    }
}
