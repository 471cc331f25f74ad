//! Run configuration: TOML file, then environment, then flags.

use std::path::{Path, PathBuf};

use rtk_core::assign::{AssignConfig, GroupsMode, Instruction, Method, PromptContext, Shots};
use rtk_core::extract::{ExtractConfig, FilterStrength};
use rtk_core::groupnames::{ContextMode, NamesConfig};
use rtk_core::llm_gateway::{DecodingConfig, GatewaySettings, ModelConfig, ReplayMode, ENV_API_BASE, ENV_REPLAY_MODE};
use rtk_core::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::errors::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub api_base: Option<String>,
    pub mode: ReplayMode,
    /// Replay store file; required outside live mode.
    pub cache: Option<PathBuf>,
    pub chat_model: String,
    pub embed_model: String,
    pub decoding: DecodingConfig,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_s: u64,
    pub context_budget_tokens: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let g = GatewaySettings::default();
        Self {
            api_base: None,
            mode: g.mode,
            cache: None,
            chat_model: String::new(),
            embed_model: String::new(),
            decoding: DecodingConfig::greedy(),
            max_in_flight: g.max_in_flight,
            max_attempts: g.max_attempts,
            backoff_ms: g.backoff_base_ms,
            timeout_s: g.timeout_s,
            context_budget_tokens: g.context_budget_tokens,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub filter: FilterStrength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NamesSection {
    pub context: ContextMode,
}

impl Default for NamesSection {
    fn default() -> Self {
        Self {
            context: ContextMode::FindingOnly,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignSection {
    pub method: Method,
    pub shots: Shots,
    pub context: PromptContext,
    pub groups: GroupsMode,
    pub instruction: Instruction,
    pub general_instruction: Option<String>,
    pub task_instruction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub gold: Vec<PathBuf>,
    pub out: PathBuf,
    /// Gold file whose group names replace the naming step.
    pub oracle_names: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            corpus: None,
            gold: Vec::new(),
            out: PathBuf::from("out"),
            oracle_names: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub extract: ExtractSection,
    pub names: NamesSection,
    pub assign: AssignSection,
    pub paths: PathsSection,
    /// Restrict to these patients; empty means all.
    pub patients: Vec<String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("reading config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))
    }

    /// Applies `RTK_API_BASE` and `RTK_REPLAY_MODE` when set.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(base) = std::env::var(ENV_API_BASE) {
            if !base.trim().is_empty() {
                self.backend.api_base = Some(base);
            }
        }
        if let Ok(mode) = std::env::var(ENV_REPLAY_MODE) {
            self.backend.mode = match mode.trim() {
                "live" => ReplayMode::Live,
                "record" => ReplayMode::Record,
                "replay" => ReplayMode::Replay,
                other => return Err(CliError::config(format!("{ENV_REPLAY_MODE}: unknown mode `{other}`"))),
            };
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, ignoring the output directory.
    /// The API key is never part of the config, so it never reaches the
    /// hash or the manifest.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out = PathsSection::default().out;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn gateway_settings(&self) -> GatewaySettings {
        let b = &self.backend;
        GatewaySettings {
            mode: b.mode,
            api_base: b.api_base.clone(),
            max_attempts: b.max_attempts,
            backoff_base_ms: b.backoff_ms,
            max_in_flight: b.max_in_flight,
            context_budget_tokens: b.context_budget_tokens,
            timeout_s: b.timeout_s,
            cache_path: b.cache.clone(),
        }
    }

    fn model(&self) -> ModelConfig {
        ModelConfig {
            model: self.backend.chat_model.clone(),
            decoding: self.backend.decoding,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let a = &self.assign;
        let mut assign = AssignConfig::new(a.method, self.model());
        assign.shots = a.shots;
        assign.context = a.context;
        assign.groups = a.groups;
        assign.instruction = a.instruction;
        assign.embed_model = self.backend.embed_model.clone();
        if let Some(i) = &a.general_instruction {
            assign.general_instruction = i.clone();
        }
        if let Some(i) = &a.task_instruction {
            assign.task_instruction = i.clone();
        }
        PipelineConfig {
            extract: ExtractConfig {
                model: self.model(),
                filter: self.extract.filter,
            },
            names: NamesConfig {
                model: self.model(),
                context: self.names.context,
            },
            assign,
        }
    }

    /// Checks that do not depend on which step runs.
    pub fn validate_backend(&self) -> Result<(), CliError> {
        let b = &self.backend;
        b.decoding.validate().map_err(CliError::config)?;
        if b.max_in_flight == 0 {
            return Err(CliError::config("backend.max_in_flight must be at least 1"));
        }
        match b.mode {
            ReplayMode::Replay if b.cache.is_none() => Err(CliError::config(
                "replay mode needs backend.cache pointing at a recorded store",
            )),
            ReplayMode::Live | ReplayMode::Record if b.api_base.is_none() => Err(CliError::config(format!(
                "{} mode needs backend.api_base or {ENV_API_BASE}",
                b.mode
            ))),
            _ => Ok(()),
        }
    }

    pub fn validate_chat(&self) -> Result<(), CliError> {
        if self.backend.chat_model.trim().is_empty() {
            return Err(CliError::config("backend.chat_model is required"));
        }
        Ok(())
    }

    pub fn validate_names(&self) -> Result<(), CliError> {
        if self.names.context == ContextMode::Gold {
            return Err(CliError::config(
                "names.context = \"gold\" is not generated; pass --oracle-names instead",
            ));
        }
        self.validate_chat()
    }

    pub fn validate_assign(&self) -> Result<(), CliError> {
        self.pipeline()
            .assign
            .validate()
            .map_err(|e| CliError::config(e.to_string()))
    }
}
