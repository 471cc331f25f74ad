//! A deterministic stand-in for the chat and embedding server. It reads
//! the same prompts a real model would and answers with keyword rules, so
//! whole pipeline runs can be recorded and replayed without a network.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rtk_core::assign::{AssignConfig, Method};
use rtk_core::extract::{render_finding_list, ExtractConfig, FilterStrength};
use rtk_core::groupnames::{tag, ContextMode, NamesConfig};
use rtk_core::llm_gateway::{
    ChatRequest, Gateway, GatewaySettings, ModelConfig, ReplayMode, ReplayStore, StoreData, Upstream, UpstreamError,
};
use rtk_core::pipeline::PipelineConfig;

pub const EMBED_DIMS: usize = 512;

/// Terms that make a sentence lung-related, and the finding type they name.
const TYPES: [(&str, &str); 12] = [
    ("ground glass", "ground glass opacity"),
    ("nodule", "nodule"),
    ("granuloma", "calcified granuloma"),
    ("emphysema", "emphysema"),
    ("effusion", "pleural effusion"),
    ("pneumothorax", "pneumothorax"),
    ("consolidation", "consolidation"),
    ("scarring", "scarring"),
    ("atelectasis", "atelectasis"),
    ("opacity", "opacity"),
    ("opacities", "opacity"),
    ("lungs", "lungs"),
];

const LOCATIONS: [(&str, &str); 7] = [
    ("right upper lobe", "right upper lobe"),
    ("right lower lobe", "right lower lobe"),
    ("left upper lobe", "left upper lobe"),
    ("left lower lobe", "left lower lobe"),
    ("lingula", "lingula"),
    ("left pleural", "left"),
    ("right pleural", "right"),
];

const STOPWORDS: [&str; 12] = [
    "the", "a", "an", "in", "of", "is", "at", "and", "has", "to", "mm", "are",
];

fn is_lung_sentence(s: &str) -> bool {
    let l = s.to_lowercase();
    TYPES.iter().any(|(k, _)| l.contains(k))
}

fn is_negated(s: &str) -> bool {
    let l = format!(" {} ", s.to_lowercase());
    l.contains(" no ") || l.contains(" resolved") || l.contains(" clear")
}

/// "right upper lobe nodule"-style name for a sentence, if it mentions a
/// known finding type.
pub fn name_for(sentence: &str) -> Option<String> {
    let l = sentence.to_lowercase();
    let kind = TYPES.iter().find(|(k, _)| l.contains(k)).map(|(_, v)| *v)?;
    match LOCATIONS.iter().find(|(k, _)| l.contains(k)) {
        Some((_, loc)) => Some(format!("{loc} {kind}")),
        None => Some(kind.to_string()),
    }
}

fn words(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .map(str::to_lowercase)
        .filter(|w| !w.is_empty() && !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Index of the label sharing the most words with `text`; first wins ties.
fn best_overlap<S: AsRef<str>>(text: &str, labels: &[S]) -> Option<usize> {
    let t = words(text);
    let mut best: Option<(usize, usize)> = None;
    for (i, l) in labels.iter().enumerate() {
        let n = words(&l.as_ref().replace('_', " ")).intersection(&t).count();
        if n > 0 && best.is_none_or(|(_, b)| n > b) {
            best = Some((i, n));
        }
    }
    best.map(|(i, _)| i)
}

/// Splits report prose into sentences, dropping section headers.
fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut line = line.trim();
        if let Some((head, rest)) = line.split_once(':') {
            if !head.is_empty() && head.chars().all(|c| c.is_ascii_uppercase() || c == ' ') {
                line = rest.trim();
            }
        }
        for s in line.split(". ") {
            let s = s.trim().trim_end_matches('.').trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
        }
    }
    out
}

fn after_last<'a>(hay: &'a str, marker: &str) -> Option<&'a str> {
    hay.rfind(marker).map(|i| &hay[i + marker.len()..])
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("").trim()
}

/// The keyword-rule fake model. Counts the calls it answers.
#[derive(Default)]
pub struct ScriptedUpstream {
    chats: AtomicU64,
    embeds: AtomicU64,
}

impl ScriptedUpstream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn chat_calls(&self) -> u64 {
        self.chats.load(Ordering::Relaxed)
    }

    pub fn embed_calls(&self) -> u64 {
        self.embeds.load(Ordering::Relaxed)
    }

    /// Answers one prompt without touching the counters.
    pub fn respond(prompt: &str) -> Option<String> {
        if prompt.trim_end().ends_with("lung_finding_list =") {
            Some(answer_extraction(prompt))
        } else if prompt.contains("Radiology Findings END") {
            Some(answer_multiple(prompt))
        } else if prompt.contains("group best describing") {
            Some(answer_single(prompt))
        } else if prompt.contains("list of group names separated by commas") {
            Some(answer_names(prompt))
        } else {
            None
        }
    }
}

fn answer_extraction(prompt: &str) -> String {
    let report = prompt.split(":\n\nPlease list all lung-related").next().unwrap_or("");
    let found: Vec<String> = sentences(report).into_iter().filter(|s| is_lung_sentence(s)).collect();
    format!(
        "Here are the lung findings from the report:\n\n```python\n{}\n```",
        render_finding_list(&found)
    )
}

fn answer_names(prompt: &str) -> String {
    let context = prompt.split(":\n\nPlease group the lung-related").next().unwrap_or("");
    let mut names: Vec<String> = Vec::new();
    for piece in context.split(['\n', '"', ';']).flat_map(|p| p.split(". ")) {
        let piece = piece.trim();
        if !is_lung_sentence(piece) || is_negated(piece) {
            continue;
        }
        if let Some(n) = name_for(piece) {
            if !names.contains(&n) {
                names.push(n);
            }
        }
    }
    format!(
        "Grouping the findings by location and type.\n\nList of group names: {}",
        names.join(", ")
    )
}

fn answer_single(prompt: &str) -> String {
    let labels = after_last(prompt, "The group labels are:\n")
        .map(first_line)
        .or_else(|| after_last(prompt, "Group labels:").map(first_line))
        .unwrap_or("");
    let labels: Vec<&str> = labels
        .split(", ")
        .map(str::trim)
        .filter(|l| !l.is_empty() && *l != "other")
        .collect();
    let finding = after_last(prompt, "The finding to be classified is: ")
        .or_else(|| after_last(prompt, "Finding to be classified: "))
        .map(first_line)
        .unwrap_or("");
    let choice = best_overlap(finding, &labels).map(|i| labels[i]).unwrap_or("other");
    format!("The finding shares the most terms with this group.\nAnswer: {choice}")
}

fn answer_multiple(prompt: &str) -> String {
    let task = after_last(prompt, "Your Task:").unwrap_or(prompt);
    let existing: Vec<String> = after_last(task, "Existing group name tags:\n")
        .map(first_line)
        .map(|l| {
            l.split(',')
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect()
        })
        .unwrap_or_default();
    let block = after_last(task, "Radiology Findings:\n").unwrap_or("");
    let block = block.split("Radiology Findings END").next().unwrap_or("");
    let mut out = String::from("Answer:\n");
    for line in block.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let text = line.trim_end_matches("<#>").trim_end();
        let chosen = match best_overlap(text, &existing) {
            Some(i) => existing[i].clone(),
            None => {
                tag(&name_for(text).unwrap_or_else(|| text.split_whitespace().take(3).collect::<Vec<_>>().join(" ")))
            }
        };
        out.push_str(&format!("{text} <{chosen}>\n"));
    }
    out
}

/// Hashed bag-of-words vector. An `Instruct: ...\nQuery: ` prefix is
/// dropped so only the query text counts.
pub fn bag_of_words(text: &str) -> Vec<f64> {
    let query = after_last(text, "\nQuery: ").unwrap_or(text);
    let mut v = vec![0.0; EMBED_DIMS];
    for w in query.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        v[fnv1a(&w.to_lowercase()) as usize % EMBED_DIMS] += 1.0;
    }
    v
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Upstream for ScriptedUpstream {
    fn chat(&self, req: &ChatRequest) -> Result<String, UpstreamError> {
        self.chats.fetch_add(1, Ordering::Relaxed);
        Self::respond(req.prompt()).ok_or_else(|| UpstreamError::Fatal("unrecognized prompt".into()))
    }

    fn embed(&self, _model: &str, inputs: &[String]) -> Result<Vec<Vec<f64>>, UpstreamError> {
        self.embeds.fetch_add(1, Ordering::Relaxed);
        Ok(inputs.iter().map(|t| bag_of_words(t)).collect())
    }
}

fn settings(mode: ReplayMode) -> GatewaySettings {
    GatewaySettings {
        mode,
        max_attempts: 1,
        backoff_base_ms: 1,
        ..GatewaySettings::default()
    }
}

/// A gateway that forwards to `upstream` and records every answer in
/// memory.
pub fn recording_gateway(upstream: Arc<ScriptedUpstream>) -> Gateway {
    Gateway::new(
        settings(ReplayMode::Record),
        ReplayStore::in_memory(StoreData::default()),
        Some(upstream),
    )
}

/// A gateway that always forwards to `upstream` and caches nothing.
pub fn live_gateway(upstream: Arc<dyn Upstream>) -> Gateway {
    Gateway::new(
        settings(ReplayMode::Live),
        ReplayStore::in_memory(StoreData::default()),
        Some(upstream),
    )
}

/// Bag-of-words embeddings multiplied by a constant; chat is unsupported.
pub struct ScaledEmbedder(pub f64);

impl Upstream for ScaledEmbedder {
    fn chat(&self, _req: &ChatRequest) -> Result<String, UpstreamError> {
        Err(UpstreamError::Fatal("embedding-only upstream".into()))
    }

    fn embed(&self, _model: &str, inputs: &[String]) -> Result<Vec<Vec<f64>>, UpstreamError> {
        Ok(inputs
            .iter()
            .map(|t| bag_of_words(t).into_iter().map(|x| x * self.0).collect())
            .collect())
    }
}

/// A replay-only gateway over previously recorded answers.
pub fn replay_gateway(data: StoreData) -> Gateway {
    Gateway::new(settings(ReplayMode::Replay), ReplayStore::in_memory(data), None)
}

pub const CHAT_MODEL: &str = "scripted-chat";
pub const EMBED_MODEL: &str = "scripted-embed";

/// Default pipeline settings against the scripted models.
pub fn scripted_config(method: Method) -> PipelineConfig {
    let model = ModelConfig::new(CHAT_MODEL);
    let mut assign = AssignConfig::new(method, model.clone());
    assign.embed_model = EMBED_MODEL.to_string();
    PipelineConfig {
        extract: ExtractConfig {
            model: model.clone(),
            filter: FilterStrength::Weak,
        },
        names: NamesConfig {
            model,
            context: ContextMode::FindingOnly,
        },
        assign,
    }
}
