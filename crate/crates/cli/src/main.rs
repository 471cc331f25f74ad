mod artifacts;
mod config;
mod errors;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rtk_core::assign::{GroupsMode, Instruction, Method, PromptContext, Shots};
use rtk_core::corpus::{load_corpus, load_gold, Corpus, GoldAnnotations};
use rtk_core::evaluation::{eval_findings, eval_grouping, eval_names, eval_names_oracle, MetricReport};
use rtk_core::extract::{gold_findings, FilterStrength, RuleDetector};
use rtk_core::grouping_metrics::{CeafVariant, CorefScores, ScorerOptions};
use rtk_core::groupnames::{ContextMode, GroupNameList};
use rtk_core::llm_gateway::{Gateway, ReplayMode, ENV_API_KEY};
use rtk_core::pipeline::{run_assign, run_extract, run_names, run_pipeline, PipelineOutput};
use rtk_core::textmetrics::AlignmentRates;
use rtk_core::timeline::{self, Format, Timeline};
use rtk_core::StepWarning;
use serde::Serialize;

use artifacts::{AssignmentsFile, FindingsFile, NamesFile, RunOutputs};
use config::RunConfig;
use errors::CliError;

#[derive(Parser)]
#[command(
    name = "rtk",
    version,
    about = "Structured timelines from longitudinal radiology reports"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reports CSV.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated patient ids.
    #[arg(long, global = true, value_delimiter = ',')]
    patients: Vec<String>,
    #[arg(long, global = true)]
    filter: Option<FilterStrength>,
    /// full, finding_only or none; applies to the step being run.
    #[arg(long, global = true)]
    context: Option<String>,
    #[arg(long, global = true)]
    names_context: Option<ContextMode>,
    #[arg(long, global = true)]
    assign_context: Option<PromptContext>,
    #[arg(long, global = true)]
    method: Option<Method>,
    #[arg(long, global = true)]
    shots: Option<Shots>,
    #[arg(long, global = true)]
    groups: Option<GroupsMode>,
    #[arg(long, global = true)]
    instruction: Option<Instruction>,
    /// Gold file whose group names stand in for generated ones.
    #[arg(long, global = true)]
    oracle_names: Option<PathBuf>,
    #[arg(long, global = true)]
    mode: Option<ReplayMode>,
    /// Replay store file.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[arg(long, global = true)]
    chat_model: Option<String>,
    #[arg(long, global = true)]
    embed_model: Option<String>,
    #[arg(long, global = true)]
    api_base: Option<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// List and filter lung findings per report.
    Extract,
    /// Propose group names per patient.
    Names {
        /// Findings artifact; required for finding-only context.
        #[arg(long)]
        findings: Option<PathBuf>,
    },
    /// Assign findings to group names.
    Assign {
        #[arg(long, conflicts_with = "gold_findings")]
        findings: Option<PathBuf>,
        /// Use the findings of this gold file instead.
        #[arg(long)]
        gold_findings: Option<PathBuf>,
        #[arg(long)]
        names: Option<PathBuf>,
    },
    /// Extract, name, assign and write timelines.
    Pipeline {
        /// Rendered views besides JSON.
        #[arg(long, value_delimiter = ',', default_value = "csv,markdown,html")]
        format: Vec<Format>,
    },
    /// Score unfiltered findings against gold.
    EvalFindings {
        #[arg(long)]
        preds: PathBuf,
        /// Gold files; defaults to paths.gold.
        #[arg(long)]
        gold: Vec<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Score group names against gold, or two gold versions against each other.
    EvalNames {
        #[arg(long, required_unless_present = "oracle")]
        preds: Option<PathBuf>,
        /// Score the two gold versions against each other.
        #[arg(long)]
        oracle: bool,
        /// Gold files; defaults to paths.gold.
        #[arg(long)]
        gold: Vec<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Score assignments made on gold findings against gold groupings.
    EvalGrouping {
        #[arg(long)]
        assignments: PathBuf,
        /// Gold files; defaults to paths.gold.
        #[arg(long)]
        gold: Vec<PathBuf>,
        /// entity or mention.
        #[arg(long, default_value = "entity", value_parser = parse_ceaf)]
        ceaf: CeafVariant,
        /// Score gold findings without an assignment as singletons.
        #[arg(long)]
        missing_as_singletons: bool,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Render a timeline JSON file.
    Render {
        #[arg(long)]
        timeline: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: Format,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
    /// Write here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_ceaf(s: &str) -> Result<CeafVariant, String> {
    match s {
        "entity" => Ok(CeafVariant::Entity),
        "mention" => Ok(CeafVariant::Mention),
        other => Err(format!("unknown CEAF variant `{other}`")),
    }
}

/// Which step a bare `--context` flag targets.
enum Step {
    Names,
    Assign,
    Pipeline,
    Other,
}

fn apply_context(cfg: &mut RunConfig, raw: &str, step: Step) -> Result<(), CliError> {
    let bad = || CliError::config(format!("--context: unknown value `{raw}`"));
    match (step, raw) {
        (Step::Names, _) => cfg.names.context = raw.parse().map_err(|_| bad())?,
        (Step::Assign, _) => cfg.assign.context = raw.parse().map_err(|_| bad())?,
        (Step::Pipeline, "full") => {
            cfg.names.context = ContextMode::Full;
            cfg.assign.context = PromptContext::Full;
        }
        (Step::Pipeline, "finding_only") => cfg.names.context = ContextMode::FindingOnly,
        (Step::Pipeline, "none") => cfg.assign.context = PromptContext::None,
        (Step::Pipeline, _) => return Err(bad()),
        (Step::Other, _) => {}
    }
    Ok(())
}

/// Defaults, then file, then environment, then flags.
fn resolve_config(g: &GlobalArgs, step: Step) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    cfg.apply_env()?;
    if let Some(v) = &g.corpus {
        cfg.paths.corpus = Some(v.clone());
    }
    if let Some(v) = &g.out {
        cfg.paths.out = v.clone();
    }
    if !g.patients.is_empty() {
        cfg.patients = g.patients.clone();
    }
    if let Some(v) = g.filter {
        cfg.extract.filter = v;
    }
    if let Some(raw) = &g.context {
        apply_context(&mut cfg, raw, step)?;
    }
    if let Some(v) = g.names_context {
        cfg.names.context = v;
    }
    if let Some(v) = g.assign_context {
        cfg.assign.context = v;
    }
    if let Some(v) = g.method {
        cfg.assign.method = v;
    }
    if let Some(v) = g.shots {
        cfg.assign.shots = v;
    }
    if let Some(v) = g.groups {
        cfg.assign.groups = v;
    }
    if let Some(v) = g.instruction {
        cfg.assign.instruction = v;
    }
    if let Some(v) = &g.oracle_names {
        cfg.paths.oracle_names = Some(v.clone());
    }
    if let Some(v) = g.mode {
        cfg.backend.mode = v;
    }
    if let Some(v) = &g.cache {
        cfg.backend.cache = Some(v.clone());
    }
    if let Some(v) = &g.chat_model {
        cfg.backend.chat_model = v.clone();
    }
    if let Some(v) = &g.embed_model {
        cfg.backend.embed_model = v.clone();
    }
    if let Some(v) = &g.api_base {
        cfg.backend.api_base = Some(v.clone());
    }
    Ok(cfg)
}

fn gateway(cfg: &RunConfig) -> Result<Gateway, CliError> {
    cfg.validate_backend()?;
    let key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.trim().is_empty());
    if cfg.backend.mode != ReplayMode::Replay && key.is_none() {
        warn!("{ENV_API_KEY} is not set; requests go out unauthenticated");
    }
    Ok(Gateway::from_settings(cfg.gateway_settings(), key)?)
}

fn corpus(cfg: &RunConfig, outputs: Option<&mut RunOutputs>) -> Result<Corpus, CliError> {
    let path = cfg
        .paths
        .corpus
        .as_deref()
        .ok_or_else(|| CliError::config("--corpus (or paths.corpus) is required"))?;
    if let Some(o) = outputs {
        o.record_input(path)?;
    }
    let all = load_corpus(path)?;
    let known: Vec<&str> = all.patients.iter().map(|p| p.patient_id.as_str()).collect();
    if let Some(missing) = cfg.patients.iter().find(|p| !known.contains(&p.as_str())) {
        return Err(CliError::config(format!("patient `{missing}` is not in the corpus")));
    }
    Ok(all.restrict(&cfg.patients))
}

fn golds(paths: &[PathBuf]) -> Result<Vec<GoldAnnotations>, CliError> {
    paths.iter().map(|p| Ok(load_gold(p, None)?)).collect()
}

fn oracle_names(
    cfg: &RunConfig,
    corpus: &Corpus,
    outputs: &mut RunOutputs,
) -> Result<Option<Vec<GroupNameList>>, CliError> {
    let Some(path) = &cfg.paths.oracle_names else {
        return Ok(None);
    };
    outputs.record_input(path)?;
    let gold = load_gold(path, None)?;
    Ok(Some(
        corpus
            .patients
            .iter()
            .map(|p| GroupNameList::from_gold(p, &gold))
            .collect(),
    ))
}

fn log_warnings(warnings: &[StepWarning]) {
    for w in warnings {
        warn!("[{}] {}: {}", w.step, w.subject, w.message);
    }
}

fn cmd_extract(cfg: RunConfig) -> Result<(), CliError> {
    cfg.validate_chat()?;
    let mut out = RunOutputs::new(&cfg.paths.out, &cfg.hash())?;
    let corpus = corpus(&cfg, Some(&mut out))?;
    let gw = gateway(&cfg)?;
    let outcomes = run_extract(&corpus.patients, &cfg.pipeline().extract, &gw, &RuleDetector::default())?;
    let mut unfiltered = Vec::new();
    let mut findings = Vec::new();
    let mut warnings = Vec::new();
    for o in outcomes {
        unfiltered.extend(o.unfiltered);
        findings.extend(o.findings);
        warnings.extend(o.warnings);
    }
    let hash = out.config_hash().to_string();
    out.write_json(
        artifacts::FINDINGS_UNFILTERED,
        &FindingsFile {
            config_hash: hash.clone(),
            findings: unfiltered,
        },
    )?;
    let n = findings.len();
    out.write_json(
        artifacts::FINDINGS,
        &FindingsFile {
            config_hash: hash,
            findings,
        },
    )?;
    log_warnings(&warnings);
    out.finish("extract", &cfg, Some(gw.stats()), &warnings)?;
    info!("{n} findings written to {}", cfg.paths.out.display());
    Ok(())
}

fn cmd_names(cfg: RunConfig, findings: Option<PathBuf>) -> Result<(), CliError> {
    cfg.validate_names()?;
    let fs = match (&findings, cfg.names.context) {
        (Some(p), _) => Some(artifacts::read_findings(p)?),
        (None, ContextMode::FindingOnly) => {
            return Err(CliError::config("finding-only context needs --findings"));
        }
        (None, _) => None,
    };
    let mut out = RunOutputs::new(&cfg.paths.out, &cfg.hash())?;
    let corpus = corpus(&cfg, Some(&mut out))?;
    if let Some(p) = &findings {
        out.record_input(p)?;
    }
    let gw = gateway(&cfg)?;
    let (lists, warnings) = run_names(&corpus.patients, fs.as_deref(), &cfg.pipeline().names, &gw)?;
    let hash = out.config_hash().to_string();
    out.write_json(
        artifacts::GROUP_NAMES,
        &NamesFile {
            config_hash: hash,
            group_names: lists,
        },
    )?;
    log_warnings(&warnings);
    out.finish("names", &cfg, Some(gw.stats()), &warnings)?;
    Ok(())
}

fn cmd_assign(
    cfg: RunConfig,
    findings: Option<PathBuf>,
    gold_findings_path: Option<PathBuf>,
    names: Option<PathBuf>,
) -> Result<(), CliError> {
    cfg.validate_assign()?;
    if cfg.assign.method != Method::Embed {
        cfg.validate_chat()?;
    }
    let mut out = RunOutputs::new(&cfg.paths.out, &cfg.hash())?;
    let corpus = corpus(&cfg, Some(&mut out))?;
    let fs = match (&findings, &gold_findings_path) {
        (Some(p), _) => {
            out.record_input(p)?;
            artifacts::read_findings(p)?
        }
        (None, Some(p)) => {
            out.record_input(p)?;
            gold_findings(&load_gold(p, None)?)
        }
        (None, None) => return Err(CliError::config("assign needs --findings or --gold-findings")),
    };
    let lists = match (&names, oracle_names(&cfg, &corpus, &mut out)?) {
        (Some(p), _) => {
            out.record_input(p)?;
            Some(artifacts::read_names(p)?)
        }
        (None, Some(lists)) => Some(lists),
        (None, None) if cfg.assign.groups == GroupsMode::Provided => {
            return Err(CliError::config(
                "assign needs --names or --oracle-names unless --groups none",
            ));
        }
        (None, None) => None,
    };
    let gw = gateway(&cfg)?;
    let patients = run_assign(&corpus.patients, &fs, lists.as_deref(), &cfg.pipeline().assign, &gw)?;
    let warnings: Vec<StepWarning> = patients
        .iter()
        .flat_map(|p| p.outcome.warnings.iter().cloned())
        .collect();
    let hash = out.config_hash().to_string();
    out.write_json(
        artifacts::ASSIGNMENTS,
        &AssignmentsFile {
            config_hash: hash,
            patients,
        },
    )?;
    log_warnings(&warnings);
    out.finish("assign", &cfg, Some(gw.stats()), &warnings)?;
    Ok(())
}

fn write_timeline(out: &mut RunOutputs, t: &Timeline, formats: &[Format]) -> Result<(), CliError> {
    let stem = format!("{}/{}", artifacts::TIMELINE_DIR, t.patient_id);
    out.write_text(&format!("{stem}.json"), &timeline::render(t, Format::Json))?;
    for f in formats.iter().filter(|f| **f != Format::Json) {
        out.write_text(&format!("{stem}.{}", f.extension()), &timeline::render(t, *f))?;
    }
    Ok(())
}

fn cmd_pipeline(cfg: RunConfig, formats: Vec<Format>) -> Result<(), CliError> {
    cfg.validate_chat()?;
    cfg.validate_assign()?;
    if cfg.paths.oracle_names.is_none() && cfg.assign.groups == GroupsMode::Provided {
        cfg.validate_names()?;
    }
    let mut out = RunOutputs::new(&cfg.paths.out, &cfg.hash())?;
    let corpus = corpus(&cfg, Some(&mut out))?;
    let oracle = oracle_names(&cfg, &corpus, &mut out)?;
    let gw = gateway(&cfg)?;
    let PipelineOutput {
        findings_unfiltered,
        findings,
        group_names,
        assignments,
        timelines,
        warnings,
    } = run_pipeline(&corpus.patients, &cfg.pipeline(), &gw, &RuleDetector::default(), oracle)?;
    let hash = out.config_hash().to_string();
    out.write_json(
        artifacts::FINDINGS_UNFILTERED,
        &FindingsFile {
            config_hash: hash.clone(),
            findings: findings_unfiltered,
        },
    )?;
    out.write_json(
        artifacts::FINDINGS,
        &FindingsFile {
            config_hash: hash.clone(),
            findings,
        },
    )?;
    out.write_json(
        artifacts::GROUP_NAMES,
        &NamesFile {
            config_hash: hash.clone(),
            group_names,
        },
    )?;
    out.write_json(
        artifacts::ASSIGNMENTS,
        &AssignmentsFile {
            config_hash: hash.clone(),
            patients: assignments,
        },
    )?;
    for mut t in timelines {
        t.config_hash = Some(hash.clone());
        write_timeline(&mut out, &t, &formats)?;
    }
    log_warnings(&warnings);
    out.finish("pipeline", &cfg, Some(gw.stats()), &warnings)?;
    Ok(())
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

fn table(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(s, "{}", padded.join("  ").trim_end());
    };
    line(&mut s, &header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    for r in &rows {
        line(&mut s, r);
    }
    s
}

fn report_rows<T>(report: &MetricReport<T>, row: impl Fn(&T) -> Vec<String>) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = report
        .per_version
        .iter()
        .map(|v| {
            let mut r = vec![v.version_id.clone()];
            r.extend(row(&v.scores));
            r
        })
        .collect();
    let mut avg = vec!["average".to_string()];
    avg.extend(row(&report.average));
    rows.push(avg);
    rows
}

fn alignment_row(a: &AlignmentRates) -> Vec<String> {
    vec![
        pct(a.mean_f1),
        format!("{:.1}", a.missed_pct),
        format!("{:.1}", a.unnecessary_pct),
        format!("{:.1}", a.duplicate_pct),
    ]
}

fn coref_row(c: &CorefScores) -> Vec<String> {
    let mut r = Vec::new();
    for m in [c.muc, c.b3, c.ceaf] {
        r.extend([pct(m.precision), pct(m.recall), pct(m.f1)]);
    }
    r.push(pct(c.conll_f1));
    r
}

fn emit<T: Serialize>(args: &ReportArgs, report: &T, text: String) -> Result<(), CliError> {
    let body = if args.json {
        let mut s = serde_json::to_string_pretty(report).expect("report serializes");
        s.push('\n');
        s
    } else {
        text
    };
    match &args.output {
        Some(p) => std::fs::write(p, body).map_err(|e| CliError::io(p, e)),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn report_index(cfg: &RunConfig) -> Result<HashMap<String, String>, CliError> {
    let path = cfg
        .paths
        .corpus
        .as_deref()
        .ok_or_else(|| CliError::config("--corpus (or paths.corpus) is required"))?;
    Ok(load_corpus(path)?.report_index())
}

fn gold_paths<'a>(flag: &'a [PathBuf], cfg: &'a RunConfig) -> &'a [PathBuf] {
    if flag.is_empty() {
        &cfg.paths.gold
    } else {
        flag
    }
}

fn cmd_eval_findings(cfg: RunConfig, preds: PathBuf, gold: Vec<PathBuf>, args: ReportArgs) -> Result<(), CliError> {
    let golds = golds(gold_paths(&gold, &cfg))?;
    let preds = artifacts::read_findings(&preds)?;
    let report = eval_findings(&golds, &preds, cfg.extract.filter, &RuleDetector::default())?;
    let rows = report_rows(&report, |s| {
        let mut r = vec![pct(s.report_rl.precision), pct(s.report_rl.recall), pct(s.report_rl.f1)];
        r.extend(alignment_row(&s.finding));
        r
    });
    let text = table(
        &["gold", "RL-P", "RL-R", "RL-F1", "F1", "missed%", "unnec%", "dup%"],
        rows,
    );
    emit(&args, &report, text)
}

fn cmd_eval_names(
    cfg: RunConfig,
    preds: Option<PathBuf>,
    oracle: bool,
    gold: Vec<PathBuf>,
    args: ReportArgs,
) -> Result<(), CliError> {
    let golds = golds(gold_paths(&gold, &cfg))?;
    let index = report_index(&cfg)?;
    let report = if oracle {
        let [a, b] = golds.as_slice() else {
            return Err(CliError::config("--oracle needs exactly two --gold files"));
        };
        eval_names_oracle(a, b, &index)?
    } else {
        let path = preds.ok_or_else(|| CliError::config("--preds is required"))?;
        eval_names(&golds, &artifacts::read_names(&path)?, &index)?
    };
    let text = table(
        &["gold", "F1", "missed%", "unnec%", "dup%"],
        report_rows(&report, alignment_row),
    );
    emit(&args, &report, text)
}

fn cmd_eval_grouping(
    cfg: RunConfig,
    assignments: PathBuf,
    gold: Vec<PathBuf>,
    opts: ScorerOptions,
    args: ReportArgs,
) -> Result<(), CliError> {
    let golds = golds(gold_paths(&gold, &cfg))?;
    let index = report_index(&cfg)?;
    let preds = artifacts::read_assignments(&assignments)?;
    let report = eval_grouping(&golds, &preds, &index, opts)?;
    let text = table(
        &[
            "gold", "MUC-P", "MUC-R", "MUC-F1", "B3-P", "B3-R", "B3-F1", "CEAF-P", "CEAF-R", "CEAF-F1", "CoNLL",
        ],
        report_rows(&report, |s| coref_row(&s.pooled)),
    );
    emit(&args, &report, text)
}

fn cmd_render(path: PathBuf, format: Format, output: Option<PathBuf>) -> Result<(), CliError> {
    let json = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let t = timeline::from_json(&json)?;
    let body = timeline::render(&t, format);
    match output {
        Some(p) => std::fs::write(&p, body).map_err(|e| CliError::io(&p, e)),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match cli.command {
        Command::Extract => cmd_extract(resolve_config(g, Step::Other)?),
        Command::Names { findings } => cmd_names(resolve_config(g, Step::Names)?, findings),
        Command::Assign {
            findings,
            gold_findings,
            names,
        } => cmd_assign(resolve_config(g, Step::Assign)?, findings, gold_findings, names),
        Command::Pipeline { format } => cmd_pipeline(resolve_config(g, Step::Pipeline)?, format),
        Command::EvalFindings { preds, gold, report } => {
            cmd_eval_findings(resolve_config(g, Step::Other)?, preds, gold, report)
        }
        Command::EvalNames {
            preds,
            oracle,
            gold,
            report,
        } => cmd_eval_names(resolve_config(g, Step::Other)?, preds, oracle, gold, report),
        Command::EvalGrouping {
            assignments,
            gold,
            ceaf,
            missing_as_singletons,
            report,
        } => {
            let opts = ScorerOptions {
                ceaf,
                missing_as_singletons,
            };
            cmd_eval_grouping(resolve_config(g, Step::Other)?, assignments, gold, opts, report)
        }
        Command::Render {
            timeline,
            format,
            output,
        } => cmd_render(timeline, format, output),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
