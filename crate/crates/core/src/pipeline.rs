//! Batch driver: ingest → code → mine → shareflows → recommend → ena →
//! metrics → stats → report, with a digest manifest of every artifact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coder::{code_corpus, export_coded_lines, CoderConfig, CodedLine};
use crate::ena::{build_model, EnaConfig, EnaModel};
use crate::eval::{
    capture_components, compare_conditions, compute_metrics, generate_report, simulate_sessions, Annotations,
    CompareConfig, EnaSummary, Estimate, MetricConfig, MetricSet, Profile, ReportInputs, Scenario, SurveyRow,
};
use crate::miner::{extract_main_flow, mine_dependency_graph, session_steps, step_label, MinerConfig, StepLog};
use crate::recommender::{replay_corpus, EngineConfig, PushPolicyConfig, RecommenderEngine, TaskDescriptor};
use crate::repository::{load_documents, KnowledgeIndex};
use crate::shareflow::{build_shareflow, render_scrollytelling, Author, FlowMeta, ShareFlow};
use crate::stats::{
    default_km_sus_groups, fit_lmm, parse_survey_table, score_km_sus, score_sus, score_tlx, tlx_boxplot_table,
    Instrument, Observation, RegressionSpec, SurveyResponse, CONDITION, OUTCOME, START, TASK,
};
use crate::trace::{
    parse_trace_log, segment_sessions, validate_corpus, write_trace_log, Corpus, Expertise, Millis, Outcome,
    ParseOptions,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Ingest,
    Code,
    Mine,
    Shareflows,
    Recommend,
    Ena,
    Metrics,
    Stats,
    Report,
    Manifest,
}

impl Stage {
    pub const RUN_ORDER: [Stage; 9] = [
        Stage::Ingest,
        Stage::Code,
        Stage::Mine,
        Stage::Shareflows,
        Stage::Recommend,
        Stage::Ena,
        Stage::Metrics,
        Stage::Stats,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Code => "code",
            Stage::Mine => "mine",
            Stage::Shareflows => "shareflows",
            Stage::Recommend => "recommend",
            Stage::Ena => "ena",
            Stage::Metrics => "metrics",
            Stage::Stats => "stats",
            Stage::Report => "report",
            Stage::Manifest => "manifest",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("[{stage}] {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, message: impl Into<String>) -> Self {
        PipelineError {
            stage,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    /// Trace log; when absent, `scenario` is simulated with the run seed.
    pub traces: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    /// Directory of knowledge-repository document records.
    pub documents: Option<PathBuf>,
    pub surveys: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub terms: Vec<String>,
    /// Hand-edited step list that replaces the mined flow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curated_flow: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Relative to the config file; defaults to `kflow-out` beside it.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_profile")]
    pub profile: Profile,
    #[serde(default)]
    pub strict: bool,
    /// Split sessions at idle gaps longer than this.
    #[serde(default)]
    pub segment_gap_ms: Option<Millis>,
    #[serde(default)]
    pub inputs: Inputs,
    /// Task names and descriptor terms; taken from the scenario when empty.
    #[serde(default)]
    pub tasks: Vec<TaskInfo>,
    #[serde(default)]
    pub coder: CoderConfig,
    #[serde(default)]
    pub miner: MinerConfig,
    #[serde(default)]
    pub ena: EnaConfig,
    #[serde(default)]
    pub policy: PushPolicyConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default = "default_threshold")]
    pub relevance_threshold: u8,
    /// Expertise level whose sessions are mined into ShareFlows.
    #[serde(default = "default_author_expertise")]
    pub author_expertise: Expertise,
}

fn default_seed() -> u64 {
    42
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("kflow-out")
}
fn default_profile() -> Profile {
    Profile::Iter3
}
fn default_threshold() -> u8 {
    2
}
fn default_author_expertise() -> Expertise {
    Expertise::Expert
}

impl PipelineConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            seed: default_seed(),
            out_dir: out_dir.into(),
            profile: default_profile(),
            strict: false,
            segment_gap_ms: None,
            inputs: Inputs::default(),
            tasks: Vec::new(),
            coder: CoderConfig::default(),
            miner: MinerConfig::default(),
            ena: EnaConfig::default(),
            policy: PushPolicyConfig::default(),
            compare: CompareConfig::default(),
            relevance_threshold: default_threshold(),
            author_expertise: default_author_expertise(),
        }
    }

    /// Parses TOML; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::new(Stage::Config, e.to_string()))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.out_dir);
        for p in [
            &mut cfg.inputs.traces,
            &mut cfg.inputs.scenario,
            &mut cfg.inputs.documents,
            &mut cfg.inputs.surveys,
            &mut cfg.inputs.annotations,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::new(Stage::Config, format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::new(Stage::Config, m));
        match (&self.inputs.traces, &self.inputs.scenario) {
            (None, None) => return err("inputs.traces: missing (set inputs.traces or inputs.scenario)".into()),
            (Some(p), _) if !p.is_file() => return err(format!("inputs.traces: {} is not a readable file", p.display())),
            (None, Some(p)) if !p.is_file() => {
                return err(format!("inputs.scenario: {} is not a readable file", p.display()))
            }
            _ => {}
        }
        for (field, path, dir) in [
            ("inputs.documents", &self.inputs.documents, true),
            ("inputs.surveys", &self.inputs.surveys, false),
            ("inputs.annotations", &self.inputs.annotations, false),
        ] {
            if let Some(p) = path {
                let ok = if dir { p.is_dir() } else { p.is_file() };
                if !ok {
                    return err(format!("{field}: {} not found", p.display()));
                }
            }
        }
        if self.compare.treatment == self.compare.baseline {
            return err("compare: treatment and baseline must differ".into());
        }
        self.coder.check().map_err(|m| PipelineError::new(Stage::Config, format!("coder: {m}")))?;
        self.ena.check().map_err(|e| PipelineError::new(Stage::Config, format!("ena: {e}")))?;
        if matches!(self.segment_gap_ms, Some(g) if g <= 0) {
            return err("segment_gap_ms: must be positive".into());
        }
        Ok(())
    }

    /// Digest of every setting that affects outputs (paths excluded).
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.inputs = Inputs::default();
        sha256(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

pub fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub stage: Stage,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputEntry {
    pub field: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Ok,
    Failed,
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: Stage,
    pub state: StageState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<InputEntry>,
    pub stages: Vec<StageStatus>,
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    pub fn artifact(&self, path: &str) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.path == path)
    }

    pub fn complete(&self) -> bool {
        self.stages.iter().all(|s| s.state == StageState::Ok)
    }
}

struct Writer {
    root: PathBuf,
    artifacts: Vec<ArtifactEntry>,
}

impl Writer {
    fn write(&mut self, stage: Stage, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .map_err(|e| PipelineError::new(stage, format!("{}: {e}", dir.display())))?;
        }
        std::fs::write(&path, bytes).map_err(|e| PipelineError::new(stage, format!("{}: {e}", path.display())))?;
        self.artifacts.push(ArtifactEntry {
            path: rel.to_string(),
            stage,
            bytes: bytes.len() as u64,
            sha256: sha256(bytes),
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, stage: Stage, rel: &str, v: &T) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(v).map_err(|e| PipelineError::new(stage, e.to_string()))?;
        text.push('\n');
        self.write(stage, rel, text.as_bytes())
    }
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub manifest: Manifest,
    pub corpus: Corpus,
    pub annotations: Annotations,
    pub lines: Vec<CodedLine>,
    pub shareflows: Vec<ShareFlow>,
    pub tasks: Vec<TaskInfo>,
    pub metrics: Option<MetricSet>,
}

#[derive(Default)]
struct State {
    corpus: Corpus,
    annotations: Annotations,
    tasks: Vec<TaskInfo>,
    lines: Vec<CodedLine>,
    flows: BTreeMap<String, Vec<String>>,
    shareflows: Vec<ShareFlow>,
    ena: Option<EnaSummary>,
    metrics: Option<MetricSet>,
    rows: Vec<crate::eval::ComparisonRow>,
    surveys: Vec<SurveyRow>,
}

fn read(stage: Stage, field: &str, p: &Path) -> Result<Vec<u8>, PipelineError> {
    std::fs::read(p).map_err(|e| PipelineError::new(stage, format!("{field}: {}: {e}", p.display())))
}

/// Runs every stage and writes `manifest.json`. On failure the manifest
/// still lists what was written and marks the failed stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    run_pipeline_until(cfg, Stage::Report)
}

/// Runs stages up to and including `last`; later stages are marked not run.
pub fn run_pipeline_until(cfg: &PipelineConfig, last: Stage) -> Result<PipelineOutput, PipelineError> {
    cfg.check()?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| PipelineError::new(Stage::Config, format!("out_dir: {}: {e}", cfg.out_dir.display())))?;
    let mut inputs = Vec::new();
    for (field, p) in [
        ("inputs.traces", &cfg.inputs.traces),
        ("inputs.scenario", &cfg.inputs.scenario),
        ("inputs.surveys", &cfg.inputs.surveys),
        ("inputs.annotations", &cfg.inputs.annotations),
    ] {
        if let Some(p) = p {
            inputs.push(InputEntry {
                field: field.into(),
                sha256: sha256(&read(Stage::Config, field, p)?),
            });
        }
    }
    if let Some(dir) = &cfg.inputs.documents {
        let docs = load_documents(dir).map_err(|e| PipelineError::new(Stage::Config, format!("inputs.documents: {e}")))?;
        inputs.push(InputEntry {
            field: "inputs.documents".into(),
            sha256: sha256(serde_json::to_string(&docs).expect("documents serialize").as_bytes()),
        });
    }

    let mut w = Writer {
        root: cfg.out_dir.clone(),
        artifacts: Vec::new(),
    };
    let mut st = State::default();
    let mut stages = Vec::new();
    let mut failure = None;
    for stage in Stage::RUN_ORDER {
        if failure.is_some() || stage > last {
            stages.push(StageStatus {
                stage,
                state: StageState::NotRun,
                error: None,
                warnings: Vec::new(),
            });
            continue;
        }
        let mut warnings = Vec::new();
        match run_stage(stage, cfg, &mut st, &mut w, &mut warnings) {
            Ok(()) => stages.push(StageStatus {
                stage,
                state: StageState::Ok,
                error: None,
                warnings,
            }),
            Err(e) => {
                stages.push(StageStatus {
                    stage,
                    state: StageState::Failed,
                    error: Some(e.message.clone()),
                    warnings,
                });
                failure = Some(e);
            }
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        config_sha256: cfg.digest(),
        inputs,
        stages,
        artifacts: w.artifacts.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(cfg.out_dir.join(MANIFEST_FILE), text)
        .map_err(|e| PipelineError::new(Stage::Manifest, e.to_string()))?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(PipelineOutput {
        manifest,
        corpus: st.corpus,
        annotations: st.annotations,
        lines: st.lines,
        shareflows: st.shareflows,
        tasks: st.tasks,
        metrics: st.metrics,
    })
}

fn run_stage(
    stage: Stage,
    cfg: &PipelineConfig,
    st: &mut State,
    w: &mut Writer,
    warnings: &mut Vec<String>,
) -> Result<(), PipelineError> {
    let fail = |m: String| PipelineError::new(stage, m);
    match stage {
        Stage::Ingest => {
            let mut tasks = cfg.tasks.clone();
            let (mut corpus, ann) = if let Some(p) = &cfg.inputs.traces {
                let bytes = read(stage, "inputs.traces", p)?;
                let parsed = parse_trace_log(&bytes, "inputs.traces", ParseOptions { strict: cfg.strict })
                    .map_err(|e| fail(format!("inputs.traces: {e}")))?;
                for d in &parsed.diagnostics {
                    warnings.push(format!("line {}: {}", d.line, d.reason));
                }
                w.json(stage, "ingest/diagnostics.json", &parsed.diagnostics)?;
                let ann = match &cfg.inputs.annotations {
                    Some(a) => {
                        let text = String::from_utf8_lossy(&read(stage, "inputs.annotations", a)?).into_owned();
                        Annotations::from_csv(&text).map_err(|e| fail(format!("inputs.annotations: {e}")))?
                    }
                    None => {
                        warnings.push("no annotations: annotation-based metrics will be skipped".into());
                        Annotations::default()
                    }
                };
                (parsed.corpus, ann)
            } else {
                let p = cfg.inputs.scenario.as_ref().expect("checked in config");
                let text = String::from_utf8_lossy(&read(stage, "inputs.scenario", p)?).into_owned();
                let sc = Scenario::from_toml(&text).map_err(|e| fail(format!("inputs.scenario: {e}")))?;
                let sim = simulate_sessions(&sc, cfg.seed).map_err(|e| fail(e.to_string()))?;
                if tasks.is_empty() {
                    tasks = sc
                        .tasks
                        .iter()
                        .map(|t| TaskInfo {
                            id: t.id.clone(),
                            name: t.name.clone(),
                            terms: t.terms.clone(),
                            curated_flow: None,
                        })
                        .collect();
                }
                w.json(stage, "ingest/truth.json", &sim.truth)?;
                (sim.corpus, sim.annotations)
            };
            if let Some(gap) = cfg.segment_gap_ms {
                corpus = segment_sessions(&corpus, gap).map_err(|e| fail(e.to_string()))?;
            }
            ann.apply_outcomes(&mut corpus);
            let report = validate_corpus(&corpus);
            for v in &report.violations {
                warnings.push(format!("{v:?}"));
            }
            w.write(stage, "ingest/traces.jsonl", write_trace_log(&corpus).as_bytes())?;
            w.write(stage, "ingest/annotations.csv", ann.to_csv().as_bytes())?;
            w.json(stage, "ingest/validation.json", &report)?;
            if corpus.sessions.is_empty() {
                return Err(fail("corpus has no sessions".into()));
            }
            let mut seen: BTreeSet<String> = tasks.iter().map(|t| t.id.clone()).collect();
            for s in &corpus.sessions {
                if seen.insert(s.key.task_id.clone()) {
                    tasks.push(TaskInfo {
                        id: s.key.task_id.clone(),
                        name: String::new(),
                        terms: Vec::new(),
                        curated_flow: None,
                    });
                }
            }
            st.tasks = tasks;
            st.corpus = corpus;
            st.annotations = ann;
        }
        Stage::Code => {
            let coded = code_corpus(&st.corpus, &cfg.coder);
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for l in &coded.lines {
                *counts.entry(l.code.name()).or_default() += 1;
            }
            w.write(stage, "code/coded_lines.jsonl", export_coded_lines(&coded.lines).as_bytes())?;
            w.json(
                stage,
                "code/summary.json",
                &serde_json::json!({ "lines": coded.lines.len(), "residual_events": coded.residual, "codes": counts }),
            )?;
            st.lines = coded.lines;
        }
        Stage::Mine => {
            for t in &st.tasks {
                let sessions: Vec<_> = st
                    .corpus
                    .sessions
                    .iter()
                    .filter(|s| s.key.task_id == t.id && s.expertise() == Some(cfg.author_expertise))
                    .collect();
                if sessions.is_empty() {
                    warnings.push(format!("task {}: no author sessions", t.id));
                    continue;
                }
                let graph = match mine_dependency_graph(&StepLog::from_sessions(sessions), &cfg.miner) {
                    Ok(g) => g,
                    Err(e) => {
                        warnings.push(format!("task {}: {e}", t.id));
                        continue;
                    }
                };
                w.write(stage, &format!("mine/{}.tsv", file_safe(&t.id)), graph.to_edge_list().as_bytes())?;
                match (&t.curated_flow, extract_main_flow(&graph)) {
                    (Some(curated), mined) => {
                        if mined.as_ref().ok() != Some(curated) {
                            warnings.push(format!("task {}: mined flow replaced by curated flow", t.id));
                        }
                        st.flows.insert(t.id.clone(), curated.clone());
                    }
                    (None, Ok(flow)) => {
                        st.flows.insert(t.id.clone(), flow);
                    }
                    (None, Err(e)) => warnings.push(format!("task {}: {e}", t.id)),
                }
            }
            w.json(stage, "mine/flows.json", &st.flows)?;
        }
        Stage::Shareflows => {
            for (task, flow) in &st.flows {
                let info = st.tasks.iter().find(|t| &t.id == task);
                let candidates: Vec<_> = st
                    .corpus
                    .sessions
                    .iter()
                    .filter(|s| &s.key.task_id == task && s.expertise() == Some(cfg.author_expertise))
                    .collect();
                // Author: the session covering most of the flow, then lowest participant id.
                let author = candidates
                    .iter()
                    .map(|s| {
                        let steps: BTreeSet<String> = session_steps(&s.events).into_iter().collect();
                        (flow.iter().filter(|l| steps.contains(*l)).count(), s)
                    })
                    .max_by(|a, b| a.0.cmp(&b.0).then(b.1.key.participant_id.cmp(&a.1.key.participant_id)))
                    .map(|(_, s)| *s);
                let Some(author) = author else { continue };
                let mut links = BTreeMap::new();
                for ev in author.events.iter().filter(|e| e.action.is_page_action()) {
                    links.entry(step_label(ev)).or_insert_with(|| ev.url.clone());
                }
                let meta = FlowMeta {
                    task_id: task.clone(),
                    task_name: info.map(|t| t.name.clone()).unwrap_or_default(),
                    author: Some(Author {
                        participant_id: author.key.participant_id.clone(),
                        display_name: author.key.participant_id.clone(),
                    }),
                    step_links: links,
                    created_ts: author.end_ts().unwrap_or(0),
                    ..FlowMeta::default()
                };
                match build_shareflow(flow, &meta) {
                    Ok(b) => {
                        warnings.extend(b.warnings.iter().map(|m| format!("{}: {m}", b.flow.id)));
                        w.write(stage, &format!("shareflows/{}.json", file_safe(&b.flow.id)), b.flow.to_record().as_bytes())?;
                        w.write(stage, &format!("shareflows/{}.html", file_safe(&b.flow.id)), &render_scrollytelling(&b.flow))?;
                        st.shareflows.push(b.flow);
                    }
                    Err(e) => warnings.push(format!("task {task}: {e}")),
                }
            }
            if st.shareflows.is_empty() {
                warnings.push("no ShareFlows were built".into());
            }
        }
        Stage::Recommend => {
            let mut engine = build_engine(cfg, st.shareflows.clone(), &st.tasks).map_err(|e| fail(e.message))?;
            let treated = Corpus {
                sessions: st
                    .corpus
                    .sessions
                    .iter()
                    .filter(|s| s.key.condition == cfg.compare.treatment)
                    .cloned()
                    .collect(),
                source: st.corpus.source.clone(),
            };
            replay_corpus(&mut engine, &treated);
            let end = treated.sessions.iter().filter_map(|s| s.end_ts()).max().unwrap_or(0);
            engine.finish(end + cfg.coder.interaction_window + 1);
            let mut out = String::new();
            for r in engine.push_log() {
                out.push_str(&serde_json::to_string(&r).map_err(|e| fail(e.to_string()))?);
                out.push('\n');
            }
            w.write(stage, "recommend/push_log.jsonl", out.as_bytes())?;
        }
        Stage::Ena => {
            let groups = [cfg.compare.treatment.as_str(), cfg.compare.baseline.as_str()];
            let model = build_model(&st.lines, &cfg.ena, groups).map_err(|e| fail(e.to_string()))?;
            if model.nodes.underdetermined {
                warnings.push("node placement is underdetermined; minimum-norm positions used".into());
            }
            w.write(stage, "ena/scores.csv", model.scores_table().as_bytes())?;
            w.write(stage, "ena/nodes.csv", model.nodes_table().as_bytes())?;
            w.write(stage, "ena/edges.csv", model.edges_table().as_bytes())?;
            w.write(stage, "ena/network.svg", model.network_svg().as_bytes())?;
            let summary = ena_summary(&model, &st.corpus, cfg);
            if let Some(u) = &summary.unfit {
                warnings.push(format!("MR1 position model unfit: {u}"));
            }
            w.json(stage, "ena/summary.json", &summary)?;
            st.ena = Some(summary);
        }
        Stage::Metrics => {
            let mcfg = MetricConfig {
                relevance_threshold: cfg.relevance_threshold,
                coder: cfg.coder.clone(),
            };
            let set = compute_metrics(&st.corpus, &st.annotations, cfg.profile, &mcfg);
            for f in &set.failures {
                warnings.push(format!("{}: {}", f.metric, f.error));
            }
            w.write(stage, "metrics/values.csv", set.to_csv().as_bytes())?;
            w.json(stage, "metrics/summary.json", &set)?;
            let comps = capture_components(&st.corpus, &st.annotations, &cfg.coder);
            let mut csv = String::from("session,condition,capture_ms,duration_ms,quality\n");
            for c in comps.iter().filter(|c| c.capture_ms > 0) {
                let q = c.quality.map_or_else(String::new, |q| format!("{q}"));
                csv.push_str(&format!("{},{},{},{},{q}\n", c.session_id, c.condition, c.capture_ms, c.duration_ms));
            }
            w.write(stage, "metrics/capture_components.csv", csv.as_bytes())?;
            st.metrics = Some(set);
        }
        Stage::Stats => {
            let set = st.metrics.as_ref().expect("metrics stage ran");
            st.rows = compare_conditions(set, &cfg.compare).map_err(|e| fail(e.to_string()))?;
            w.json(stage, "stats/comparisons.json", &st.rows)?;
            if let Some(p) = &cfg.inputs.surveys {
                let text = String::from_utf8_lossy(&read(stage, "inputs.surveys", p)?).into_owned();
                let responses = parse_survey_table(&text).map_err(|e| fail(format!("inputs.surveys: {e}")))?;
                let (rows, tlx) = survey_rows(&responses).map_err(|e| fail(format!("inputs.surveys: {e}")))?;
                let mut csv = String::from("instrument,measure,condition,n,mean,sd\n");
                for r in &rows {
                    csv.push_str(&format!(
                        "{},{},{},{},{:.4},{:.4}\n",
                        r.instrument, r.measure, r.condition, r.n, r.mean, r.sd
                    ));
                }
                w.write(stage, "stats/surveys.csv", csv.as_bytes())?;
                for (cond, table) in tlx {
                    w.write(stage, &format!("stats/tlx_{}.csv", file_safe(&cond)), table.as_bytes())?;
                }
                st.surveys = rows;
            }
        }
        Stage::Report => {
            let rep = generate_report(&ReportInputs {
                title: "Condition comparison report",
                rows: &st.rows,
                metrics: st.metrics.as_ref(),
                ena: st.ena.as_ref(),
                surveys: &st.surveys,
            })
            .map_err(|e| fail(e.to_string()))?;
            w.write(stage, "report/report.csv", rep.csv.as_bytes())?;
            w.write(stage, "report/report.html", rep.html.as_bytes())?;
        }
        Stage::Config | Stage::Manifest => {}
    }
    Ok(())
}

/// Recommender over a ShareFlow library with the configured coder, policy,
/// task descriptors and (when given) the document index.
pub fn build_engine(
    cfg: &PipelineConfig,
    library: Vec<ShareFlow>,
    tasks: &[TaskInfo],
) -> Result<RecommenderEngine, PipelineError> {
    let fail = |m: String| PipelineError::new(Stage::Recommend, m);
    let index = match &cfg.inputs.documents {
        Some(dir) => {
            let docs = load_documents(dir).map_err(|e| fail(format!("inputs.documents: {e}")))?;
            Some(KnowledgeIndex::build(docs).map_err(|e| fail(format!("inputs.documents: {e}")))?)
        }
        None => None,
    };
    let tasks = tasks
        .iter()
        .map(|t| TaskDescriptor {
            task_id: t.id.clone(),
            terms: t.terms.clone(),
        })
        .collect();
    let config = EngineConfig {
        coder: cfg.coder.clone(),
        policy: cfg.policy.clone(),
        ..EngineConfig::default()
    };
    Ok(RecommenderEngine::new(config, library, index, tasks))
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn outcome_label(o: Outcome) -> &'static str {
    match o {
        Outcome::Pass => "pass",
        Outcome::Fail => "fail",
        Outcome::Unknown => "unknown",
    }
}

/// Group means on MR1 and the position model with condition, task, start
/// condition and outcome as fixed effects.
fn ena_summary(model: &EnaModel, corpus: &Corpus, cfg: &PipelineConfig) -> EnaSummary {
    let mut first: BTreeMap<&str, (Millis, &str)> = BTreeMap::new();
    for s in &corpus.sessions {
        if let Some(ts) = s.start_ts() {
            let e = first.entry(s.key.participant_id.as_str()).or_insert((ts, s.key.condition.as_str()));
            if ts < e.0 {
                *e = (ts, s.key.condition.as_str());
            }
        }
    }
    let mut data = Vec::new();
    let mut units = [0usize; 2];
    for (u, score) in model.units.iter().zip(&model.space.scores) {
        let g = usize::from(u.unit.condition != model.groups[0]);
        units[g] += 1;
        let start = first.get(u.unit.participant_id.as_str()).map_or("", |v| v.1);
        data.push(Observation::new(
            score[0],
            &u.unit.participant_id,
            &[
                (CONDITION, u.unit.condition.as_str()),
                (TASK, u.unit.task_id.as_str()),
                (START, start),
                (OUTCOME, outcome_label(u.outcome)),
            ],
        ));
    }
    let total: f64 = model.space.variance.iter().sum();
    let variance = model
        .space
        .variance
        .iter()
        .take(2)
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    let spec = RegressionSpec::network_position("mr1").with_reference(CONDITION, &cfg.compare.baseline);
    let column = format!("{CONDITION}[{}]", cfg.compare.treatment);
    let (estimate, unfit) = match fit_lmm(&spec, &data) {
        Ok(f) => match f.coef(&column) {
            Some(j) => (
                Some(Estimate {
                    column,
                    beta: f.beta[j],
                    se: f.se[j],
                    stat_name: "t".into(),
                    stat: f.t[j],
                    p: f.p[j],
                    ci_low: f.ci_low[j],
                    ci_high: f.ci_high[j],
                }),
                None,
            ),
            None => (None, Some(format!("no {column} column"))),
        },
        Err(e) => (None, Some(e.to_string())),
    };
    EnaSummary {
        groups: model.groups.clone(),
        units,
        mr1_means: [
            model.space.group_means[0].first().copied().unwrap_or(0.0),
            model.space.group_means[1].first().copied().unwrap_or(0.0),
        ],
        variance,
        estimate,
        unfit,
    }
}

type TlxTables = Vec<(String, String)>;

/// Per-condition SUS, KM-SUS (overall and subscales) and TLX summaries.
fn survey_rows(responses: &[SurveyResponse]) -> Result<(Vec<SurveyRow>, TlxTables), crate::stats::StatsError> {
    let groups = default_km_sus_groups();
    let mut samples: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let mut tlx: BTreeMap<String, Vec<SurveyResponse>> = BTreeMap::new();
    for r in responses {
        let cond = r.condition.clone().unwrap_or_else(|| "all".into());
        match r.instrument {
            Instrument::Sus => {
                let v = score_sus(r)?;
                samples.entry(("sus".into(), "score".into(), cond)).or_default().push(v);
            }
            Instrument::KmSus => {
                let s = score_km_sus(r, &groups)?;
                samples.entry(("km_sus".into(), "overall".into(), cond.clone())).or_default().push(s.overall);
                for (p, v) in s.subscales {
                    samples.entry(("km_sus".into(), p.as_str().into(), cond.clone())).or_default().push(v);
                }
            }
            Instrument::NasaTlx => tlx.entry(cond).or_default().push(r.clone()),
        }
    }
    let mut rows: Vec<SurveyRow> = samples
        .into_iter()
        .map(|((instrument, measure, condition), vs)| {
            let s = crate::eval::ConditionSummary::of(&condition, &vs);
            SurveyRow {
                instrument,
                measure,
                condition,
                n: s.n,
                mean: s.mean,
                sd: s.sd,
            }
        })
        .collect();
    let mut tables = Vec::new();
    for (cond, rs) in tlx {
        let summary = score_tlx(&rs)?;
        for d in &summary.dimensions {
            rows.push(SurveyRow {
                instrument: "nasa_tlx".into(),
                measure: d.dimension.clone(),
                condition: cond.clone(),
                n: d.n,
                mean: d.mean,
                sd: d.sd,
            });
        }
        tables.push((cond, tlx_boxplot_table(&summary)));
    }
    Ok((rows, tables))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_traces_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::new(dir.path());
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage, Stage::Config);
        assert!(err.message.starts_with("inputs.traces"), "{}", err.message);
    }

    #[test]
    fn relative_paths_resolve() {
        let cfg = PipelineConfig::from_toml("out_dir = \"out\"\n[inputs]\ntraces = \"t.jsonl\"\n", Path::new("/base"))
            .unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("/base/out"));
        assert_eq!(cfg.inputs.traces, Some(PathBuf::from("/base/t.jsonl")));
        assert!(PipelineConfig::from_toml("out_dir = \"o\"\nbogus = 1\n", Path::new("/")).is_err());
    }

    #[test]
    fn digest_ignores_paths() {
        let a = PipelineConfig::new("/a");
        let mut b = PipelineConfig::new("/b");
        assert_eq!(a.digest(), b.digest());
        b.seed = 7;
        assert_ne!(a.digest(), b.digest());
    }
}
