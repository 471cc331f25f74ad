//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines are always shown; exits non-zero if any fails.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rtk_core::assign::{assign_embed, Assignment, Method, Origin};
use rtk_core::corpus::{load_corpus, load_gold, GoldAnnotations};
use rtk_core::evaluation::{eval_names_oracle, gold_agreement};
use rtk_core::extract::{filter_findings, FilterStrength, Finding, RuleDetector};
use rtk_core::grouping_metrics::{score, Clustering, CorefScores, Prf, ScorerOptions};
use rtk_core::groupnames::GroupName;
use rtk_core::llm_gateway::StoreData;
use rtk_core::pipeline::{run_pipeline, PipelineOutput};
use rtk_core::textmetrics::{lcs_len, rouge_l_text};
use rtk_core::timeline::{render, Format};
use rtk_testkit::fixtures::{
    absence_cases, absence_findings, check_finding_lists, check_group_names, check_multiple_tags, check_single_answers,
    SetResult,
};
use rtk_testkit::oracle::{brute_lcs, brute_rouge_f1};
use rtk_testkit::random::{clustering_pair, rng, token_pair};
use rtk_testkit::{
    brute_force_oracle, live_gateway, recording_gateway, replay_gateway, scripted_config, synthetic_corpus,
    synthetic_corpus_csv, synthetic_gold, synthetic_gold_json, ScaledEmbedder, ScriptedUpstream,
};

const EPS: f64 = 1e-12;

/// Paths to the two annotated gold files and their corpus; criterion 9
/// runs only when all three are set.
const ENV_GOLD_A: &str = "RTK_ACCEPT_GOLD_A";
const ENV_GOLD_B: &str = "RTK_ACCEPT_GOLD_B";
const ENV_GOLD_CORPUS: &str = "RTK_ACCEPT_CORPUS";

type Criterion = (&'static str, fn() -> Verdict);

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn prf_close(a: Prf, b: Prf) -> bool {
    (a.precision - b.precision).abs() <= EPS && (a.recall - b.recall).abs() <= EPS && (a.f1 - b.f1).abs() <= EPS
}

fn scores_close(a: &CorefScores, b: &CorefScores) -> bool {
    prf_close(a.muc, b.muc)
        && prf_close(a.b3, b.b3)
        && prf_close(a.ceaf, b.ceaf)
        && (a.conll_f1 - b.conll_f1).abs() <= EPS
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn rouge_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = rng(1);
    let pairs = 2000;
    let mut bad = 0;
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let (a, b) = token_pair(&mut r, 10, 4);
        if lcs_len(&a, &b) != brute_lcs(&a, &b) {
            bad += 1;
        }
        let got = rouge_l_text(&a.join(" "), &b.join(" ")).f1;
        worst = worst.max((got - brute_rouge_f1(&a, &b)).abs());
    }
    let took = start.elapsed();
    verdict(
        bad == 0 && worst <= EPS && took < Duration::from_secs(5),
        format!(
            "{pairs} pairs, {bad} LCS mismatches, max |dF1| {worst:.1e}, {}",
            secs(took)
        ),
    )
}

fn running_example() -> CorefScores {
    let key = Clustering::new([vec!["a", "b", "c"]]).unwrap();
    let resp = Clustering::new([vec!["a", "b"], vec!["c"]]).unwrap();
    score(&key, &resp, ScorerOptions::default()).unwrap()
}

fn coref_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = rng(2);
    let pairs = 600;
    let mut bad = 0;
    for _ in 0..pairs {
        let (key, resp) = clustering_pair(&mut r, 12, 6);
        let got = score(&key, &resp, ScorerOptions::default()).unwrap();
        if !scores_close(&got, &brute_force_oracle(&key, &resp)) {
            bad += 1;
        }
    }
    let s = running_example();
    let example_ok = (s.muc.f1 - 2.0 / 3.0).abs() <= EPS
        && (s.b3.f1 - 5.0 / 7.0).abs() <= EPS
        && (s.ceaf.f1 - 8.0 / 15.0).abs() <= EPS
        && (s.conll_f1 - 0.6381).abs() < 5e-5;
    let took = start.elapsed();
    verdict(
        bad == 0 && example_ok && took < Duration::from_secs(30),
        format!(
            "{pairs} pairs, {bad} mismatches; example MUC {:.4} B3 {:.4} CEAF-e {:.4} CoNLL {:.4}; {}",
            s.muc.f1,
            s.b3.f1,
            s.ceaf.f1,
            s.conll_f1,
            secs(took)
        ),
    )
}

/// Same partition with every cluster tag renamed.
fn relabeled(c: &Clustering) -> Clustering {
    let pairs: Vec<(String, String)> = c
        .clusters()
        .iter()
        .enumerate()
        .flat_map(|(i, cl)| cl.iter().map(move |m| (m.clone(), format!("renamed-{}", 97 - i))))
        .collect();
    Clustering::from_labels(pairs.iter().map(|(m, t)| (m.as_str(), t.as_str()))).unwrap()
}

fn metric_identities() -> Verdict {
    let mut r = rng(3);
    let n = 500;
    let (mut identity, mut relabel, mut duality, mut all_singleton) = (0, 0, 0, 0);
    let opts = ScorerOptions::default();
    for _ in 0..n {
        let (key, resp) = clustering_pair(&mut r, 12, 6);
        let own = score(&key, &key, opts).unwrap();
        // With no links MUC is reported as a flagged 0, so only B3 and
        // CEAF can reach 1 there.
        let perfect = if key.clusters().iter().any(|c| c.len() > 1) {
            (own.conll_f1 - 1.0).abs() <= EPS
        } else {
            all_singleton += 1;
            own.muc_degenerate && (own.b3.f1 - 1.0).abs() <= EPS && (own.ceaf.f1 - 1.0).abs() <= EPS
        };
        if !perfect {
            identity += 1;
        }
        let base = score(&key, &resp, opts).unwrap();
        if !scores_close(&base, &score(&relabeled(&key), &relabeled(&resp), opts).unwrap()) {
            relabel += 1;
        }
        let swapped = score(&resp, &key, opts).unwrap();
        let dual = |a: Prf, b: Prf| (a.precision - b.recall).abs() <= EPS && (a.recall - b.precision).abs() <= EPS;
        let muc_dual = base.muc_degenerate || swapped.muc_degenerate || dual(base.muc, swapped.muc);
        if !(muc_dual && dual(base.b3, swapped.b3) && dual(base.ceaf, swapped.ceaf)) {
            duality += 1;
        }
    }
    verdict(
        identity + relabel + duality == 0,
        format!(
            "{n} instances ({all_singleton} all-singleton keys); failures: identity {identity}, relabel {relabel}, \
             duality {duality}"
        ),
    )
}

fn parser_fixtures() -> Verdict {
    let sets: [(&str, SetResult); 4] = [
        ("finding lists", check_finding_lists()),
        ("group names", check_group_names()),
        ("single answers", check_single_answers()),
        ("multiple tags", check_multiple_tags()),
    ];
    let expected = [20, 20, 20, 10];
    let ok = sets.iter().zip(expected).all(|((_, s), n)| s.total == n && s.ok());
    let detail = sets
        .iter()
        .map(|(name, s)| format!("{name} {}/{}", s.passed(), s.total))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(ok, detail)
}

fn filter_containment() -> Verdict {
    let detector = RuleDetector::default();
    let fs = absence_findings();
    let weak = filter_findings(&fs, FilterStrength::Weak, &detector);
    let aggressive = filter_findings(&fs, FilterStrength::Aggressive, &detector);
    let weak_ids: Vec<&str> = weak.iter().map(|f| f.finding_id.as_str()).collect();
    let contained = aggressive.iter().all(|f| weak_ids.contains(&f.finding_id.as_str()));
    let kept = |set: &[Finding], text: &str| set.iter().any(|f| f.text == text);
    let probe = |text: &str| {
        let f = [Finding::generated("probe", 0, text)];
        (
            !filter_findings(&f, FilterStrength::Weak, &detector).is_empty(),
            !filter_findings(&f, FilterStrength::Aggressive, &detector).is_empty(),
        )
    };
    let no_new = probe("no new nodules");
    let no_masses = probe("Lungs: no masses");
    let labeled = absence_cases()
        .iter()
        .filter(|c| kept(&weak, &c.text) == c.weak && kept(&aggressive, &c.text) == c.aggressive)
        .count();
    verdict(
        fs.len() == 30 && contained && no_new == (false, false) && no_masses == (true, false) && labeled == 30,
        format!(
            "{} fixtures, weak keeps {}, aggressive keeps {}, subset {contained}, labels {labeled}/30; \
             \"no new nodules\" kept (weak, aggressive) = {no_new:?}, \"Lungs: no masses\" = {no_masses:?}",
            fs.len(),
            weak.len(),
            aggressive.len()
        ),
    )
}

fn timeline_bytes(out: &PipelineOutput) -> Vec<String> {
    out.timelines.iter().map(|t| render(t, Format::Json)).collect()
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

fn replay_determinism() -> Verdict {
    let corpus = synthetic_corpus();
    let detector = RuleDetector::default();
    let mut notes = Vec::new();
    let mut ok = true;
    for method in [Method::Embed, Method::LlmSingle] {
        let cfg = scripted_config(method);
        let gw = recording_gateway(Arc::new(ScriptedUpstream::new()));
        let recorded = run_pipeline(&corpus.patients, &cfg, &gw, &detector, None).unwrap();
        let store: StoreData = gw.store().snapshot();
        let runs: Vec<PipelineOutput> = (0..2)
            .map(|_| run_pipeline(&corpus.patients, &cfg, &replay_gateway(store.clone()), &detector, None).unwrap())
            .collect();
        let identical = timeline_bytes(&runs[0]) == timeline_bytes(&runs[1])
            && timeline_bytes(&runs[0]) == timeline_bytes(&recorded);
        let cells: Vec<String> = runs[0]
            .timelines
            .iter()
            .flat_map(|t| t.texts().map(String::from))
            .collect();
        let findings: Vec<String> = runs[0].findings.iter().map(|f| f.text.clone()).collect();
        let multiset = sorted(cells) == sorted(findings);
        ok &= identical && multiset && corpus.patients.len() == 3;
        notes.push(format!(
            "{method:?}: identical {identical}, cells = findings {multiset} ({} findings)",
            runs[0].findings.len()
        ));
    }
    verdict(ok, notes.join("; "))
}

fn embed_assign(scale: f64, fs: &[Finding], names: &[GroupName]) -> Vec<Assignment> {
    let gw = live_gateway(Arc::new(ScaledEmbedder(scale)));
    assign_embed(fs, names, &scripted_config(Method::Embed).assign, &gw).unwrap()
}

fn tags(a: &[Assignment]) -> Vec<String> {
    a.iter().map(|x| x.group.tag.clone()).collect()
}

fn embedding_properties() -> Verdict {
    let names: Vec<GroupName> = [
        "right upper lobe nodule",
        "left pleural effusion",
        "calcified granuloma",
        "emphysema",
    ]
    .into_iter()
    .filter_map(GroupName::new)
    .collect();
    let texts = [
        "4 mm nodule in the right upper lobe",
        "small left effusion",
        "granuloma unchanged",
        "centrilobular emphysema",
        "stable nodule",
    ];
    let fs: Vec<Finding> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Finding::generated("r1", i, *t))
        .collect();
    let base = tags(&embed_assign(1.0, &fs, &names));
    let scales = [1e-3, 0.5, 7.0, 1e4];
    let invariant = scales.iter().all(|&s| tags(&embed_assign(s, &fs, &names)) == base);

    let own: Vec<Finding> = names
        .iter()
        .enumerate()
        .map(|(i, n)| Finding::generated("r2", i, n.display.clone()))
        .collect();
    let self_match = tags(&embed_assign(1.0, &own, &names)) == names.iter().map(|n| n.tag.clone()).collect::<Vec<_>>();

    let tied: Vec<GroupName> = ["left lung", "right lung"]
        .into_iter()
        .filter_map(GroupName::new)
        .collect();
    let probe = [Finding::generated("r3", 0, "left right")];
    let forward = tags(&embed_assign(1.0, &probe, &tied));
    let reversed: Vec<GroupName> = tied.iter().rev().cloned().collect();
    let backward = tags(&embed_assign(1.0, &probe, &reversed));
    let tie_first = forward == [tied[0].tag.clone()] && backward == [tied[1].tag.clone()];

    verdict(
        invariant && self_match && tie_first,
        format!("scale invariance {invariant} over {scales:?}, self-match {self_match}, tie to first {tie_first}"),
    )
}

/// Prediction that merges every nodule-like group and splits one finding
/// off, so it disagrees with both gold versions in different ways.
fn constructed_prediction(gold: &GoldAnnotations) -> Vec<Assignment> {
    gold.findings
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let name = gold.group_name(&f.group_id).unwrap_or(&f.group_id).to_string();
            let display = if name.contains("nodule") || name.contains("granuloma") {
                "nodules".to_string()
            } else if i == 2 {
                "split off".to_string()
            } else {
                name
            };
            Assignment {
                finding_id: f.finding_id.clone(),
                group: GroupName::new(display).unwrap(),
                origin: Origin::Existing,
            }
        })
        .collect()
}

fn pooled_clustering(pairs: impl IntoIterator<Item = (String, String)>) -> Clustering {
    let pairs: Vec<(String, String)> = pairs.into_iter().collect();
    Clustering::from_labels(pairs.iter().map(|(m, t)| (m.as_str(), t.as_str()))).unwrap()
}

fn two_version_average() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, body: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    };
    let corpus = write("corpus.csv", &synthetic_corpus_csv());
    let gold_a = write("gold_A.json", &synthetic_gold_json("A"));
    let gold_b = write("gold_B.json", &synthetic_gold_json("B"));
    let prediction = constructed_prediction(&synthetic_gold("A"));
    let preds = write("pred.json", &serde_json::to_string(&prediction).unwrap());

    let out = Command::new(env!("CARGO_BIN_EXE_rtk"))
        .arg("--corpus")
        .arg(&corpus)
        .arg("eval-grouping")
        .arg("--assignments")
        .arg(&preds)
        .args([
            "--gold".as_ref(),
            gold_a.as_os_str(),
            "--gold".as_ref(),
            gold_b.as_os_str(),
            "--json".as_ref(),
        ])
        .output()
        .unwrap();
    if !out.status.success() {
        return Verdict::Fail(format!(
            "rtk eval-grouping failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let conll = |v: &serde_json::Value| v["pooled"]["conll_f1"].as_f64().unwrap();
    let versions = report["per_version"].as_array().unwrap();
    let (a, b) = (conll(&versions[0]["scores"]), conll(&versions[1]["scores"]));
    let average = conll(&report["average"]);

    // Independent CoNLL against each version from the brute-force scorer.
    // Groups never span patients, so labels are qualified by patient.
    let gold_a = synthetic_gold("A");
    let index = synthetic_corpus().report_index();
    let patient_of: HashMap<&str, &str> = gold_a
        .findings
        .iter()
        .map(|f| (f.finding_id.as_str(), index[&f.report_id].as_str()))
        .collect();
    let resp = pooled_clustering(prediction.iter().map(|p| {
        (
            p.finding_id.clone(),
            format!("{}/{}", patient_of[p.finding_id.as_str()], p.group.tag),
        )
    }));
    let oracle = |v: &str| {
        let g = synthetic_gold(v);
        let key = pooled_clustering(
            g.findings
                .iter()
                .map(|f| (f.finding_id.clone(), format!("{}/{}", index[&f.report_id], f.group_id))),
        );
        brute_force_oracle(&key, &resp).conll_f1
    };
    let (oa, ob) = (oracle("A"), oracle("B"));
    let exact = average == (a + b) / 2.0;
    let matches_oracle = (a - oa).abs() <= EPS && (b - ob).abs() <= EPS && (average - (oa + ob) / 2.0).abs() <= EPS;
    verdict(
        exact && matches_oracle && (a - b).abs() > EPS,
        format!(
            "CoNLL(P,A) {a:.6}, CoNLL(P,B) {b:.6}, reported average {average:.6}, oracle mean {:.6}",
            (oa + ob) / 2.0
        ),
    )
}

fn annotated_data() -> Verdict {
    let vars: Vec<Option<PathBuf>> = [ENV_GOLD_A, ENV_GOLD_B, ENV_GOLD_CORPUS]
        .iter()
        .map(|k| std::env::var_os(k).map(PathBuf::from))
        .collect();
    let [Some(a), Some(b), Some(corpus)] = vars.as_slice() else {
        return Verdict::Skip(format!("set {ENV_GOLD_A}, {ENV_GOLD_B} and {ENV_GOLD_CORPUS} to run"));
    };
    let load = || -> Result<(GoldAnnotations, GoldAnnotations, HashMap<String, String>), String> {
        let ga = load_gold(a, None).map_err(|e| e.to_string())?;
        let gb = load_gold(b, None).map_err(|e| e.to_string())?;
        let index = load_corpus(corpus).map_err(|e| e.to_string())?.report_index();
        Ok((ga, gb, index))
    };
    let (ga, gb, index) = match load() {
        Ok(x) => x,
        Err(e) => return Verdict::Fail(e),
    };
    let agreement = match gold_agreement(&ga, &gb, &index, ScorerOptions::default()) {
        Ok(s) => s.conll_f1 * 100.0,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let names = match eval_names_oracle(&ga, &gb, &index) {
        Ok(r) => r.average,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let targets: BTreeMap<&str, (f64, f64)> = BTreeMap::from([
        ("RL", (names.mean_f1 * 100.0, 87.0)),
        ("Miss", (names.missed_pct, 9.0)),
        ("Dup", (names.duplicate_pct, 11.0)),
        ("Unnec", (names.unnecessary_pct, 9.0)),
    ]);
    let names_ok = targets.values().all(|(got, want)| (got - want).abs() <= 1.0);
    let detail = targets
        .iter()
        .map(|(k, (got, want))| format!("{k} {got:.1} (want {want})"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        (agreement - 82.0).abs() <= 0.5 && names_ok,
        format!("inter-annotator CoNLL {agreement:.2} (want 82 +/- 0.5); oracle names {detail}"),
    )
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture or a name filter are accepted and
    // ignored; every criterion always runs.
    let criteria: [Criterion; 9] = [
        ("ROUGE-L vs exhaustive LCS", rouge_oracle),
        ("coreference metrics vs brute-force oracle", coref_oracle),
        ("metric identities", metric_identities),
        ("parser fixtures", parser_fixtures),
        ("absence filter containment", filter_containment),
        ("end-to-end replay determinism", replay_determinism),
        ("embedding grouper properties", embedding_properties),
        ("two-version averaging via CLI", two_version_average),
        ("annotated gold agreement", annotated_data),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (tag, detail) = match check() {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {} {tag}: {name}: {detail}", i + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
