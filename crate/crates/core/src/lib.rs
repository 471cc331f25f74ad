//! Timeline structured summarization of longitudinal radiology reports.
//!
//! A patient's dated exam reports become a two-dimensional timeline: one
//! column per exam, one row per group of temporally related lung findings.
//! The timeline is produced by three LLM-driven steps:
//!
//! 1. [`extract`] lists the lung findings of each report and drops findings
//!    that only describe absent observations.
//! 2. [`groupnames`] proposes interpretable row headers from the patient's
//!    longitudinal context.
//! 3. [`assign`] maps every finding onto a row header, either by prompting
//!    or by embedding similarity.
//!
//! [`timeline`] assembles and renders the grid. [`textmetrics`] and
//! [`grouping_metrics`] score generated artifacts against gold annotations,
//! and [`evaluation`] wires them into the finding, group-name and grouping
//! evaluations. All model traffic goes through [`llm_gateway`], which can
//! record and replay responses for deterministic runs.

pub mod assign;
pub mod corpus;
pub mod evaluation;
pub mod extract;
pub mod grouping_metrics;
pub mod groupnames;
pub mod llm_gateway;
pub mod pipeline;
pub mod textmetrics;
pub mod timeline;

mod hungarian;
mod util;

pub use util::{natural_cmp, parallel_map};

/// A step could not recover a usable answer from a model response.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{what}: could not parse model response")]
pub struct ParseFailure {
    pub what: &'static str,
    pub raw: String,
}

impl ParseFailure {
    pub fn new(what: &'static str, raw: impl Into<String>) -> Self {
        Self { what, raw: raw.into() }
    }
}

/// A recoverable problem recorded during a run (parse fallbacks, retries).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StepWarning {
    pub step: String,
    /// Report, patient or finding id the warning is about.
    pub subject: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

impl StepWarning {
    pub fn new(step: &str, subject: &str, message: impl Into<String>) -> Self {
        Self {
            step: step.to_string(),
            subject: subject.to_string(),
            message: message.into(),
            raw_response: None,
        }
    }

    pub fn with_raw(mut self, raw: impl Into<String>) -> Self {
        self.raw_response = Some(raw.into());
        self
    }
}
