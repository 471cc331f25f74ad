//! Runs the three steps over a set of patients.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{assign_patient, AssignConfig, AssignError, AssignOutcome, Assignment, Method, PromptContext};
use crate::corpus::PatientRecord;
use crate::extract::{extract_step, AbsenceDetector, ExtractConfig, ExtractError, ExtractOutcome, Finding};
use crate::groupnames::{build_context, generate_groupnames, ContextMode, GroupNameList, GroupNamesError, NamesConfig};
use crate::llm_gateway::Gateway;
use crate::timeline::{assemble, Timeline, TimelineError};
use crate::{parallel_map, StepWarning};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Names(#[from] GroupNamesError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error("no group names for patient `{0}`")]
    MissingNames(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub extract: ExtractConfig,
    pub names: NamesConfig,
    pub assign: AssignConfig,
}

/// Step 1 over every report of every patient.
pub fn run_extract(
    patients: &[PatientRecord],
    cfg: &ExtractConfig,
    gateway: &Gateway,
    detector: &dyn AbsenceDetector,
) -> Result<Vec<ExtractOutcome>, ExtractError> {
    let reports: Vec<_> = patients.iter().flat_map(|p| &p.reports).collect();
    parallel_map(&reports, gateway.max_in_flight(), |r| {
        extract_step(r, cfg, gateway, detector)
    })
    .into_iter()
    .collect()
}

/// Finding texts keyed by report, in finding order.
pub fn texts_by_report(fs: &[Finding]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for f in fs {
        out.entry(f.report_id.clone()).or_default().push(f.text.clone());
    }
    out
}

/// Findings of one patient, in input order.
pub fn patient_findings<'a>(patient: &PatientRecord, fs: &'a [Finding]) -> Vec<&'a Finding> {
    fs.iter().filter(|f| patient.report(&f.report_id).is_some()).collect()
}

/// Step 2 per patient. Reports without findings get an empty entry in
/// finding-only mode.
pub fn run_names(
    patients: &[PatientRecord],
    findings: Option<&[Finding]>,
    cfg: &NamesConfig,
    gateway: &Gateway,
) -> Result<(Vec<GroupNameList>, Vec<StepWarning>), GroupNamesError> {
    let by_report = findings.map(|fs| {
        let mut m = texts_by_report(fs);
        for p in patients {
            for r in &p.reports {
                m.entry(r.report_id.clone()).or_default();
            }
        }
        m
    });
    let results = parallel_map(patients, gateway.max_in_flight(), |p| {
        generate_groupnames(p, by_report.as_ref(), cfg, gateway)
    });
    let mut lists = Vec::with_capacity(patients.len());
    let mut warnings = Vec::new();
    for r in results {
        let (list, w) = r?;
        lists.push(list);
        warnings.extend(w);
    }
    Ok((lists, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientAssignments {
    pub patient_id: String,
    #[serde(flatten)]
    pub outcome: AssignOutcome,
}

/// Step 3 per patient. `names` must cover every patient unless the config
/// asks the model to invent all tags.
pub fn run_assign(
    patients: &[PatientRecord],
    findings: &[Finding],
    names: Option<&[GroupNameList]>,
    cfg: &AssignConfig,
    gateway: &Gateway,
) -> Result<Vec<PatientAssignments>, PipelineError> {
    cfg.validate()?;
    let by_patient: HashMap<&str, &GroupNameList> = names
        .unwrap_or_default()
        .iter()
        .map(|l| (l.patient_id.as_str(), l))
        .collect();
    let needs_names = cfg.groups == crate::assign::GroupsMode::Provided;
    let results = parallel_map(patients, gateway.max_in_flight(), |p| -> Result<_, PipelineError> {
        let fs: Vec<Finding> = patient_findings(p, findings).into_iter().cloned().collect();
        let list = by_patient.get(p.patient_id.as_str());
        if needs_names && list.is_none() && !fs.is_empty() {
            return Err(PipelineError::MissingNames(p.patient_id.clone()));
        }
        let context = if cfg.context == PromptContext::Full && cfg.method != Method::Embed {
            Some(build_context(p, ContextMode::Full, None)?)
        } else {
            None
        };
        let outcome = assign_patient(&fs, list.map(|l| l.names.as_slice()), context.as_deref(), cfg, gateway)?;
        Ok(PatientAssignments {
            patient_id: p.patient_id.clone(),
            outcome,
        })
    });
    results.into_iter().collect()
}

/// All artifacts of a full run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub findings_unfiltered: Vec<Finding>,
    pub findings: Vec<Finding>,
    pub group_names: Vec<GroupNameList>,
    pub assignments: Vec<PatientAssignments>,
    pub timelines: Vec<Timeline>,
    pub warnings: Vec<StepWarning>,
}

impl PipelineOutput {
    pub fn all_assignments(&self) -> Vec<Assignment> {
        self.assignments
            .iter()
            .flat_map(|p| p.outcome.assignments.iter().cloned())
            .collect()
    }
}

pub fn assemble_timelines(
    patients: &[PatientRecord],
    findings: &[Finding],
    assignments: &[Assignment],
) -> Result<Vec<Timeline>, TimelineError> {
    patients
        .iter()
        .map(|p| {
            let fs: Vec<Finding> = patient_findings(p, findings).into_iter().cloned().collect();
            let ids: std::collections::HashSet<&str> = fs.iter().map(|f| f.finding_id.as_str()).collect();
            let own: Vec<Assignment> = assignments
                .iter()
                .filter(|a| ids.contains(a.finding_id.as_str()))
                .cloned()
                .collect();
            assemble(p, &fs, &own)
        })
        .collect()
}

/// Extract, name, assign and assemble. With `oracle` names the naming step
/// is skipped and those lists are used as its output.
pub fn run_pipeline(
    patients: &[PatientRecord],
    cfg: &PipelineConfig,
    gateway: &Gateway,
    detector: &dyn AbsenceDetector,
    oracle: Option<Vec<GroupNameList>>,
) -> Result<PipelineOutput, PipelineError> {
    cfg.assign.validate()?;
    let outcomes = run_extract(patients, &cfg.extract, gateway, detector)?;
    let mut out = PipelineOutput::default();
    for o in outcomes {
        out.findings_unfiltered.extend(o.unfiltered);
        out.findings.extend(o.findings);
        out.warnings.extend(o.warnings);
    }
    let needs_names = cfg.assign.groups == crate::assign::GroupsMode::Provided;
    out.group_names = match oracle {
        Some(lists) => lists,
        None if needs_names => {
            let (lists, warnings) = run_names(patients, Some(&out.findings), &cfg.names, gateway)?;
            out.warnings.extend(warnings);
            lists
        }
        None => Vec::new(),
    };
    let names = needs_names.then_some(out.group_names.as_slice());
    out.assignments = run_assign(patients, &out.findings, names, &cfg.assign, gateway)?;
    for p in &out.assignments {
        out.warnings.extend(p.outcome.warnings.iter().cloned());
    }
    out.timelines = assemble_timelines(patients, &out.findings, &out.all_assignments())?;
    Ok(out)
}
