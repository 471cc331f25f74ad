use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use rtk_core::assign::Method;
use rtk_core::corpus::Corpus;
use rtk_core::extract::{gold_findings, RuleDetector};
use rtk_core::groupnames::GroupNameList;
use rtk_core::llm_gateway::StoreData;
use rtk_core::pipeline::{run_assign, run_pipeline};
use rtk_testkit::{
    recording_gateway, scripted_config, synthetic_corpus, synthetic_corpus_csv, synthetic_gold, synthetic_gold_json,
    ScriptedUpstream, CHAT_MODEL, EMBED_MODEL,
};
use serde_json::Value;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Corpus, both gold versions and a replay store covering the runs the
    /// tests make.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("corpus.csv"), synthetic_corpus_csv()).unwrap();
        for v in ["A", "B"] {
            std::fs::write(dir.path().join(format!("gold_{v}.json")), synthetic_gold_json(v)).unwrap();
        }
        let corpus = synthetic_corpus();
        let mut store = StoreData::default();
        for (method, oracle) in [
            (Method::LlmSingle, false),
            (Method::Embed, false),
            (Method::LlmSingle, true),
        ] {
            let gw = recording_gateway(Arc::new(ScriptedUpstream::default()));
            let names = oracle.then(|| oracle_lists(&corpus));
            run_pipeline(
                &corpus.patients,
                &scripted_config(method),
                &gw,
                &RuleDetector::default(),
                names,
            )
            .unwrap();
            let snap = gw.store().snapshot();
            store.chat.extend(snap.chat);
            store.embed.extend(snap.embed);
        }
        let gw = recording_gateway(Arc::new(ScriptedUpstream::default()));
        let gold = gold_findings(&synthetic_gold("A"));
        let cfg = scripted_config(Method::LlmSingle).assign;
        run_assign(&corpus.patients, &gold, Some(&oracle_lists(&corpus)), &cfg, &gw).unwrap();
        store.chat.extend(gw.store().snapshot().chat);
        std::fs::write(dir.path().join("cache.json"), serde_json::to_vec(&store).unwrap()).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn rtk(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_rtk"))
            .current_dir(self.dir.path())
            .env_remove("RTK_API_BASE")
            .env_remove("RTK_REPLAY_MODE")
            .env_remove("RTK_API_KEY")
            .args(args)
            .output()
            .unwrap()
    }

    /// Replay-mode invocation against the scripted models.
    fn replay(&self, args: &[&str]) -> Output {
        let mut all = vec![
            "--corpus",
            "corpus.csv",
            "--mode",
            "replay",
            "--cache",
            "cache.json",
            "--chat-model",
            CHAT_MODEL,
            "--embed-model",
            EMBED_MODEL,
            "--filter",
            "weak",
        ];
        all.extend_from_slice(args);
        self.rtk(&all)
    }
}

fn oracle_lists(corpus: &Corpus) -> Vec<GroupNameList> {
    let gold = synthetic_gold("A");
    corpus
        .patients
        .iter()
        .map(|p| GroupNameList::from_gold(p, &gold))
        .collect()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let ws = Workspace::new();
    for method in ["single", "embed"] {
        let a = format!("run_{method}");
        ok(&ws.replay(&["--method", method, "--out", &a, "pipeline"]));
        let first = read_tree(&ws.path(&a));
        std::fs::remove_dir_all(ws.path(&a)).unwrap();
        ok(&ws.replay(&["--method", method, "--out", &a, "pipeline"]));
        assert_eq!(first, read_tree(&ws.path(&a)));
        let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
        for p in ["P001", "P002", "P003"] {
            for ext in ["json", "csv", "md", "html"] {
                let want = format!("timelines/{p}.{ext}");
                assert!(names.contains(&want.as_str()), "missing {want}");
            }
        }
        let manifest = json(&ws.path(&a).join("manifest.json"));
        assert_eq!(manifest["gateway"]["upstream_requests"], 0);
        let t = json(&ws.path(&a).join("timelines/P001.json"));
        assert_eq!(t["config_hash"], manifest["config_hash"]);
    }
}

#[test]
fn oracle_names_skip_the_naming_step() {
    let ws = Workspace::new();
    let out = ws.replay(&[
        "--method",
        "single",
        "--oracle-names",
        "gold_A.json",
        "--out",
        "oracle",
        "pipeline",
    ]);
    ok(&out);
    let names = json(&ws.path("oracle/group_names.json"));
    let lists = names["group_names"].as_array().unwrap();
    assert!(lists.iter().all(|l| l["context_mode"] == "gold"));
}

#[test]
fn step_commands_chain_through_artifacts() {
    let ws = Workspace::new();
    ok(&ws.replay(&["--out", "steps", "extract"]));
    ok(&ws.replay(&["--out", "steps", "names", "--findings", "steps/findings.json"]));
    ok(&ws.replay(&[
        "--method",
        "single",
        "--out",
        "steps",
        "assign",
        "--findings",
        "steps/findings.json",
        "--names",
        "steps/group_names.json",
    ]));
    ok(&ws.replay(&["--method", "single", "--out", "whole", "pipeline"]));
    for (file, key) in [
        ("findings.json", "findings"),
        ("group_names.json", "group_names"),
        ("assignments.json", "patients"),
    ] {
        assert_eq!(
            json(&ws.path("steps").join(file))[key],
            json(&ws.path("whole").join(file))[key],
            "{file}"
        );
    }
}

#[test]
fn finding_only_names_without_findings_is_a_config_error() {
    let ws = Workspace::new();
    let out = ws.replay(&["--context", "finding_only", "names"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_without_cache_is_a_config_error() {
    let ws = Workspace::new();
    let out = ws.rtk(&[
        "--corpus",
        "corpus.csv",
        "--mode",
        "replay",
        "--chat-model",
        "m",
        "extract",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_miss_is_an_upstream_error() {
    let ws = Workspace::new();
    std::fs::write(ws.path("empty.json"), "{}").unwrap();
    let out = ws.rtk(&[
        "--corpus",
        "corpus.csv",
        "--mode",
        "replay",
        "--cache",
        "empty.json",
        "--chat-model",
        CHAT_MODEL,
        "extract",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replay miss"));
}

#[test]
fn eval_grouping_scores_assignments_on_gold_findings() {
    let ws = Workspace::new();
    ok(&ws.replay(&[
        "--method",
        "single",
        "--oracle-names",
        "gold_A.json",
        "--out",
        "on_gold",
        "assign",
        "--gold-findings",
        "gold_A.json",
    ]));
    let out = ws.rtk(&[
        "--corpus",
        "corpus.csv",
        "eval-grouping",
        "--assignments",
        "on_gold/assignments.json",
        "--gold",
        "gold_A.json",
        "--json",
    ]);
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let f1 = report["average"]["pooled"]["conll_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    let text = ws.rtk(&[
        "--corpus",
        "corpus.csv",
        "eval-grouping",
        "--assignments",
        "on_gold/assignments.json",
        "--gold",
        "gold_A.json",
        "--gold",
        "gold_B.json",
    ]);
    ok(&text);
    let table = String::from_utf8(text.stdout).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(table.lines().last().unwrap().starts_with("average"));
}

#[test]
fn eval_names_oracle_needs_two_golds() {
    let ws = Workspace::new();
    let one = ws.rtk(&[
        "--corpus",
        "corpus.csv",
        "eval-names",
        "--oracle",
        "--gold",
        "gold_A.json",
    ]);
    assert_eq!(one.status.code(), Some(2));
    let two = ws.rtk(&[
        "--corpus",
        "corpus.csv",
        "eval-names",
        "--oracle",
        "--gold",
        "gold_A.json",
        "--gold",
        "gold_B.json",
        "--json",
    ]);
    ok(&two);
    let report: Value = serde_json::from_slice(&two.stdout).unwrap();
    assert_eq!(report["per_version"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_findings_reads_pipeline_output() {
    let ws = Workspace::new();
    ok(&ws.replay(&["--out", "ex", "extract"]));
    let out = ws.rtk(&[
        "--corpus",
        "corpus.csv",
        "eval-findings",
        "--preds",
        "ex/findings_unfiltered.json",
        "--gold",
        "gold_A.json",
        "--json",
    ]);
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["average"]["reports"], 6);
}

#[test]
fn render_writes_each_format() {
    let ws = Workspace::new();
    ok(&ws.replay(&["--method", "embed", "--out", "r", "pipeline", "--format", "json"]));
    for (format, needle) in [("csv", "group,"), ("md", "| group |"), ("html", "<table")] {
        let out = ws.rtk(&["render", "--timeline", "r/timelines/P001.json", "--format", format]);
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains(needle), "{format}");
    }
}
