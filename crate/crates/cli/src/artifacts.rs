//! Step artifacts on disk and the run manifest.

use std::path::{Path, PathBuf};

use rtk_core::assign::Assignment;
use rtk_core::extract::Finding;
use rtk_core::groupnames::GroupNameList;
use rtk_core::llm_gateway::GatewayStats;
use rtk_core::pipeline::PatientAssignments;
use rtk_core::StepWarning;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::errors::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const FINDINGS: &str = "findings.json";
pub const FINDINGS_UNFILTERED: &str = "findings_unfiltered.json";
pub const GROUP_NAMES: &str = "group_names.json";
pub const ASSIGNMENTS: &str = "assignments.json";
pub const TIMELINE_DIR: &str = "timelines";

#[derive(Serialize, Deserialize)]
pub struct FindingsFile {
    pub config_hash: String,
    pub findings: Vec<Finding>,
}

#[derive(Serialize, Deserialize)]
pub struct NamesFile {
    pub config_hash: String,
    pub group_names: Vec<GroupNameList>,
}

#[derive(Serialize, Deserialize)]
pub struct AssignmentsFile {
    pub config_hash: String,
    pub patients: Vec<PatientAssignments>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn read_value(path: &Path) -> Result<Value, CliError> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn decode<T: DeserializeOwned>(path: &Path, v: Value) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// A findings artifact, or a bare JSON list of findings.
pub fn read_findings(path: &Path) -> Result<Vec<Finding>, CliError> {
    match read_value(path)? {
        Value::Object(mut m) if m.contains_key("findings") => decode(path, m.remove("findings").unwrap()),
        v => decode(path, v),
    }
}

/// A names artifact, or a bare list of per-patient name lists.
pub fn read_names(path: &Path) -> Result<Vec<GroupNameList>, CliError> {
    match read_value(path)? {
        Value::Object(mut m) if m.contains_key("group_names") => decode(path, m.remove("group_names").unwrap()),
        v => decode(path, v),
    }
}

/// An assignments artifact, or a bare list of assignments.
pub fn read_assignments(path: &Path) -> Result<Vec<Assignment>, CliError> {
    match read_value(path)? {
        Value::Object(mut m) if m.contains_key("patients") => {
            let patients: Vec<PatientAssignments> = decode(path, m.remove("patients").unwrap())?;
            Ok(patients.into_iter().flat_map(|p| p.outcome.assignments).collect())
        }
        v => decode(path, v),
    }
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_hash: &'a str,
    config: &'a RunConfig,
    inputs: &'a [FileEntry],
    outputs: &'a [FileEntry],
    gateway: Option<GatewayStats>,
    warning_count: usize,
    warnings: &'a [StepWarning],
}

/// Collects written files and the inputs they came from, then writes the
/// manifest. Everything written is deterministic for a fixed config and
/// replay store.
pub struct RunOutputs {
    dir: PathBuf,
    config_hash: String,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

impl RunOutputs {
    pub fn new(dir: &Path, config_hash: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn record_input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_hex(&read_bytes(path)?);
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(text.as_bytes()),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.write_text(rel, &text)
    }

    pub fn finish(
        mut self,
        command: &str,
        config: &RunConfig,
        gateway: Option<GatewayStats>,
        warnings: &[StepWarning],
    ) -> Result<PathBuf, CliError> {
        let inputs = std::mem::take(&mut self.inputs);
        let outputs = std::mem::take(&mut self.outputs);
        let manifest = Manifest {
            tool: "rtk",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_hash: &self.config_hash,
            config,
            inputs: &inputs,
            outputs: &outputs,
            gateway,
            warning_count: warnings.len(),
            warnings,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
