//! Curated parser and filter fixture sets, with checkers that report
//! every failing case.

use std::path::PathBuf;

use rtk_core::assign::{pair_lines, parse_single_answer, parse_tagged_lines, SingleAnswer};
use rtk_core::extract::{detect_absence, keeps, parse_finding_list, FilterStrength, Finding, RuleDetector};
use rtk_core::groupnames::{parse_groupnames, tag, GroupName};
use serde::Deserialize;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn load<T: for<'de> Deserialize<'de>>(name: &str) -> Vec<T> {
    let text = std::fs::read_to_string(fixture_path(name)).expect("fixture readable");
    serde_json::from_str(&text).expect("fixture parses")
}

/// Outcome of one fixture set: the names of failing cases.
pub struct SetResult {
    pub total: usize,
    pub failures: Vec<String>,
}

impl SetResult {
    pub fn passed(&self) -> usize {
        self.total - self.failures.len()
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn run<T>(cases: Vec<T>, check: impl Fn(&T) -> Result<(), String>) -> SetResult {
    let failures = cases.iter().filter_map(|c| check(c).err()).collect();
    SetResult {
        total: cases.len(),
        failures,
    }
}

#[derive(Deserialize)]
struct ListCase {
    case: String,
    response: String,
    expected: Vec<String>,
}

pub fn check_finding_lists() -> SetResult {
    run(load::<ListCase>("finding_lists.json"), |c| {
        let got: Vec<String> = parse_finding_list(&c.response, "r")
            .map_err(|e| format!("{}: {e}", c.case))?
            .into_iter()
            .map(|f| f.text)
            .collect();
        (got == c.expected)
            .then_some(())
            .ok_or_else(|| format!("{}: got {got:?}", c.case))
    })
}

pub fn check_group_names() -> SetResult {
    run(load::<ListCase>("group_names.json"), |c| {
        let got: Vec<String> = parse_groupnames(&c.response)
            .map_err(|e| format!("{}: {e}", c.case))?
            .into_iter()
            .map(|n| n.display)
            .collect();
        (got == c.expected)
            .then_some(())
            .ok_or_else(|| format!("{}: got {got:?}", c.case))
    })
}

#[derive(Deserialize)]
struct SingleCase {
    case: String,
    names: Vec<String>,
    response: String,
    expected: String,
}

pub fn check_single_answers() -> SetResult {
    run(load::<SingleCase>("single_answers.json"), |c| {
        let names: Vec<GroupName> = c.names.iter().filter_map(GroupName::new).collect();
        let got = match parse_single_answer(&c.response, &names).map_err(|e| format!("{}: {e}", c.case))? {
            SingleAnswer::Name(i) => names[i].display.clone(),
            SingleAnswer::Other => "other".to_string(),
        };
        (got == c.expected)
            .then_some(())
            .ok_or_else(|| format!("{}: got {got}", c.case))
    })
}

#[derive(Deserialize)]
struct MultipleCase {
    case: String,
    findings: Vec<String>,
    response: String,
    expected: Vec<String>,
}

pub fn check_multiple_tags() -> SetResult {
    run(load::<MultipleCase>("multiple_tags.json"), |c| {
        let lines = parse_tagged_lines(&c.response);
        let texts: Vec<&str> = lines.iter().map(|l| l.text.as_str()).collect();
        let got: Vec<String> = pair_lines(&c.findings, &texts)
            .into_iter()
            .map(|p| p.map(|i| tag(&lines[i].raw_tag)).unwrap_or_default())
            .collect();
        let want: Vec<String> = c.expected.iter().map(|t| tag(t)).collect();
        (got == want)
            .then_some(())
            .ok_or_else(|| format!("{}: got {got:?}", c.case))
    })
}

#[derive(Deserialize)]
pub struct AbsenceCase {
    pub text: String,
    pub weak: bool,
    pub aggressive: bool,
}

pub fn absence_cases() -> Vec<AbsenceCase> {
    load("absence.json")
}

pub fn absence_findings() -> Vec<Finding> {
    absence_cases()
        .iter()
        .enumerate()
        .map(|(i, c)| Finding::generated("fx", i, c.text.clone()))
        .collect()
}

pub fn check_absence_labels() -> SetResult {
    let detector = RuleDetector::default();
    run(absence_cases(), |c| {
        let f = Finding::generated("fx", 0, c.text.clone());
        let v = detect_absence(&f, &detector);
        let got = (keeps(&v, FilterStrength::Weak), keeps(&v, FilterStrength::Aggressive));
        (got == (c.weak, c.aggressive))
            .then_some(())
            .ok_or_else(|| format!("{:?}: got weak={} aggressive={}", c.text, got.0, got.1))
    })
}
