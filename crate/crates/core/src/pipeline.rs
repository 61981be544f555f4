//! Manifest-driven execution of prep → split → prompt → run → match → eval.
//!
//! Every stage reads and writes JSONL (or report) files only; nothing is
//! passed in memory between stages, so any stage can be replaced by an
//! external tool. Stage outputs live in the manifest's `out_dir`:
//!
//! | stage  | inputs                                  | outputs |
//! |--------|-----------------------------------------|---------|
//! | prep   | dataset                                 | `preprocessed.jsonl` |
//! | split  | `preprocessed.jsonl`                    | `train.jsonl`, `test.jsonl` |
//! | prompt | `train.jsonl`, `test.jsonl`, taxonomy   | `train_prompts.jsonl`, `test_prompts.jsonl` |
//! | run    | `test_prompts.jsonl`, replay file       | `raw.jsonl` |
//! | match  | `raw.jsonl`, taxonomy                   | `predictions.jsonl` |
//! | eval   | `predictions.jsonl`, `test.jsonl`, taxonomy | `report.json`, `report.md`, `report_csv/*.csv` |
//!
//! The taxonomy is only an input when the manifest names a file; otherwise
//! the bundled one is used.
//!
//! After each successful stage `run_log.json` is rewritten. It holds the crate
//! version, the seed, and the SHA-256 of every input and output, and nothing
//! time- or host-dependent, so equal manifests give equal logs. With
//! `resume`, a stage whose inputs and configuration hash to the logged key
//! and whose outputs still match their logged hashes is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{self, Backend, BackendConfig, BackendError, BatchError, FailureMode, RawLine};
use crate::corpus::{self, CorpusError, CweId, Dataset, LabelSet, LabelSetError};
use crate::eval::{self, EvalError, EvalReport, MissingPolicy, PredictionRecord, ReportFormat};
use crate::jsonl::{self, JsonlError};
use crate::preprocess::{preprocess, PreprocessConfig};
use crate::prompt::{
    Placement, PromptBuilder, PromptError, PromptLine, PromptStyle, PromptTemplate,
    ResponseVariant, StyleKind, TemplateName,
};
use crate::taxonomy::{self, CweTaxonomy, TaxonomyError};
use crate::textsim::{Matcher, TextSimError};

pub const RUN_LOG: &str = "run_log.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prep,
    Split,
    Prompt,
    Run,
    Match,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Prep,
        Stage::Split,
        Stage::Prompt,
        Stage::Run,
        Stage::Match,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prep => "prep",
            Stage::Split => "split",
            Stage::Prompt => "prompt",
            Stage::Run => "run",
            Stage::Match => "match",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Labels(#[from] LabelSetError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Matcher(#[from] TextSimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Batch(#[from] BatchError),
}

impl StageError {
    /// 3 for backend failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::Backend(_) | StageError::Batch(_) => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("reading manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Only the message and line are kept; the source text may hold anything.
    #[error("invalid manifest at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
    },
}

impl PipelineError {
    /// 1 for manifest problems, otherwise the stage error's code.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Manifest(_) => 1,
            PipelineError::Stage { source, .. } => source.exit_code(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelsConfig {
    pub cwes: Option<Vec<u32>>,
    pub benign_response: Option<String>,
}

impl LabelsConfig {
    pub fn label_set(&self) -> Result<LabelSet, LabelSetError> {
        let d = LabelSet::default();
        let cwes: Vec<CweId> = match &self.cwes {
            Some(v) => v.iter().map(|&i| CweId(i)).collect(),
            None => d.cwes().to_vec(),
        };
        LabelSet::new(
            cwes,
            self.benign_response
                .clone()
                .unwrap_or_else(|| d.benign_response().to_string()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub per_label_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub template: TemplateName,
    /// Replaces the built-in text for `template`.
    pub template_text: Option<String>,
    pub style: StyleKind,
    pub soft_token: Option<String>,
    pub insertions: Option<usize>,
    pub placement: Placement,
    /// `desc`, `id` or `id+desc`.
    pub response: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            template: TemplateName::Simple,
            template_text: None,
            style: StyleKind::Hard,
            soft_token: None,
            insertions: None,
            placement: Placement::default(),
            response: ResponseVariant::default().to_string(),
        }
    }
}

impl PromptConfig {
    pub fn template(&self) -> Result<PromptTemplate, PromptError> {
        match &self.template_text {
            Some(t) => PromptTemplate::new(self.template, t.clone()),
            None => Ok(PromptTemplate::builtin(self.template)),
        }
    }

    pub fn style(&self, seed: u64) -> PromptStyle {
        let mut s = PromptStyle::new(self.style);
        s.seed = seed;
        if let Some(t) = &self.soft_token {
            s.soft_token = t.clone();
        }
        s.insertions = self.insertions;
        s.placement = self.placement;
        s
    }

    pub fn response_variant(&self) -> Result<ResponseVariant, PromptError> {
        self.response.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub missing: MissingPolicy,
    /// Any of `json`, `markdown`, `csv`.
    pub formats: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            missing: MissingPolicy::Error,
            formats: vec!["json".into(), "markdown".into()],
        }
    }
}

pub fn parse_format(s: &str) -> Option<ReportFormat> {
    match s.to_ascii_lowercase().as_str() {
        "json" => Some(ReportFormat::Json),
        "csv" => Some(ReportFormat::Csv),
        "markdown" | "md" => Some(ReportFormat::Markdown),
        _ => None,
    }
}

/// Everything a pipeline run depends on. Relative paths resolve against
/// the directory of the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineManifest {
    #[serde(default)]
    pub seed: u64,
    pub dataset: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub taxonomy: Option<String>,
    #[serde(default)]
    pub labels: LabelsConfig,
    #[serde(default)]
    pub prep: PreprocessConfig,
    pub split: SplitConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub run: BackendConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_out_dir() -> String {
    "out".into()
}

impl PipelineManifest {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ManifestError> {
        let mut m: Self = toml::from_str(text).map_err(|e| ManifestError::Parse {
            line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            message: e.message().trim_end().to_string(),
        })?;
        m.base_dir = base_dir.into();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let invalid = |m: String| ManifestError::Invalid(m);
        self.labels.label_set().map_err(|e| invalid(e.to_string()))?;
        self.prompt.template().map_err(|e| invalid(e.to_string()))?;
        self.prompt
            .response_variant()
            .map_err(|e| invalid(e.to_string()))?;
        for f in &self.eval.formats {
            parse_format(f).ok_or_else(|| invalid(format!("unknown report format {f:?}")))?;
        }
        self.run.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    fn resolve(&self, p: &str) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.resolve(&self.out_dir).join(name)
    }

    fn formats(&self) -> Vec<ReportFormat> {
        let mut v: Vec<ReportFormat> = self.eval.formats.iter().filter_map(|f| parse_format(f)).collect();
        v.dedup();
        v
    }

    fn out_io(&self, name: &str) -> StageFile {
        StageFile {
            name: name.to_string(),
            path: self.out_path(name),
        }
    }

    fn external_io(&self, name: &str) -> StageFile {
        StageFile {
            name: name.to_string(),
            path: self.resolve(name),
        }
    }

    /// Declared inputs and outputs of `stage`.
    pub fn stage_io(&self, stage: Stage) -> StageIo {
        let tax: Vec<StageFile> = self.taxonomy.iter().map(|t| self.external_io(t)).collect();
        let (inputs, outputs) = match stage {
            Stage::Prep => (
                vec![self.external_io(&self.dataset)],
                vec![self.out_io("preprocessed.jsonl")],
            ),
            Stage::Split => (
                vec![self.out_io("preprocessed.jsonl")],
                vec![self.out_io("train.jsonl"), self.out_io("test.jsonl")],
            ),
            Stage::Prompt => (
                [vec![self.out_io("train.jsonl"), self.out_io("test.jsonl")], tax].concat(),
                vec![self.out_io("train_prompts.jsonl"), self.out_io("test_prompts.jsonl")],
            ),
            Stage::Run => {
                let mut inputs = vec![self.out_io("test_prompts.jsonl")];
                if self.run.kind == backend::BackendKind::Replay {
                    if let Some(r) = &self.run.replay_file {
                        inputs.push(self.external_io(r));
                    }
                }
                (inputs, vec![self.out_io("raw.jsonl")])
            }
            Stage::Match => (
                [vec![self.out_io("raw.jsonl")], tax].concat(),
                vec![self.out_io("predictions.jsonl")],
            ),
            Stage::Eval => {
                let mut outputs = Vec::new();
                for f in self.formats() {
                    match f {
                        ReportFormat::Json => outputs.push(self.out_io("report.json")),
                        ReportFormat::Markdown => outputs.push(self.out_io("report.md")),
                        ReportFormat::Csv => {
                            outputs.push(self.out_io("report_csv/per_label.csv"));
                            outputs.push(self.out_io("report_csv/distance.csv"));
                        }
                    }
                }
                (
                    [vec![self.out_io("predictions.jsonl"), self.out_io("test.jsonl")], tax].concat(),
                    outputs,
                )
            }
        };
        StageIo { inputs, outputs }
    }

    /// Configuration that influences `stage`'s outputs, as canonical JSON.
    fn stage_config(&self, stage: Stage) -> String {
        let labels = serde_json::to_value(&self.labels).expect("serializable");
        let v = match stage {
            Stage::Prep => serde_json::json!({ "labels": labels, "prep": self.prep }),
            Stage::Split => serde_json::json!({ "labels": labels, "split": self.split, "seed": self.seed }),
            Stage::Prompt => serde_json::json!({ "labels": labels, "prompt": self.prompt, "seed": self.seed }),
            Stage::Run => {
                let r = &self.run;
                serde_json::json!({
                    "kind": r.kind,
                    "endpoint": r.endpoint,
                    "model_name": r.model_name,
                    "temperature": r.temperature,
                    "max_output_tokens": r.max_output_tokens,
                })
            }
            Stage::Match => serde_json::json!({ "labels": labels, "response": self.prompt.response }),
            Stage::Eval => serde_json::json!({ "labels": labels, "eval": self.eval }),
        };
        v.to_string()
    }

    fn load_taxonomy(&self) -> Result<CweTaxonomy, StageError> {
        match &self.taxonomy {
            Some(p) => Ok(taxonomy::load_taxonomy(&self.resolve(p))?),
            None => Ok(CweTaxonomy::bundled()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageFile {
    /// Path as written in the run log: relative to `out_dir` for stage
    /// outputs, as given in the manifest for external inputs.
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageIo {
    pub inputs: Vec<StageFile>,
    pub outputs: Vec<StageFile>,
}

pub fn sha256_file(path: &Path) -> Result<String, StageError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(path: &Path, body: &str) -> Result<(), StageError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, body).map_err(io_err(path))
}

// ---- stage bodies -------------------------------------------------------

pub fn prep_stage(
    input: &Path,
    output: &Path,
    labels: &LabelSet,
    cfg: &PreprocessConfig,
) -> Result<Dataset, StageError> {
    let d = corpus::load_dataset(input, labels)?;
    // re-validate so that samples whose code was only comments are reported
    let d = Dataset::new(d.map_code(|c| preprocess(c, cfg)).samples().to_vec())?;
    write_file(output, &d.to_jsonl())?;
    Ok(d)
}

pub fn split_stage(
    input: &Path,
    train_out: &Path,
    test_out: &Path,
    labels: &LabelSet,
    per_label_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset), StageError> {
    let d = corpus::load_dataset(input, labels)?;
    let (train, test) = corpus::stratified_split(&d, per_label_test, seed)?;
    write_file(train_out, &train.to_jsonl())?;
    write_file(test_out, &test.to_jsonl())?;
    Ok((train, test))
}

pub fn prompt_stage(
    input: &Path,
    output: &Path,
    builder: &PromptBuilder<'_>,
) -> Result<Vec<PromptLine>, StageError> {
    let d = corpus::load_dataset(input, builder.labels)?;
    let lines: Vec<PromptLine> = builder.build_corpus(&d)?.iter().map(PromptLine::from).collect();
    write_file(output, &jsonl::to_string(&lines))?;
    Ok(lines)
}

/// Writes the successful responses even when some samples failed, then
/// reports the failures.
pub fn run_stage(
    input: &Path,
    output: &Path,
    backend: &dyn Backend,
    concurrency_limit: usize,
    mode: FailureMode,
) -> Result<Vec<RawLine>, StageError> {
    let prompts: Vec<PromptLine> = jsonl::read(input)?;
    let out = backend::query_batch(backend, &prompts, concurrency_limit, mode)?;
    let failures = out.failures;
    let lines: Vec<RawLine> = out.predictions.iter().map(RawLine::from).collect();
    write_file(output, &jsonl::to_string(&lines))?;
    if !failures.is_empty() {
        return Err(BatchError {
            total: prompts.len(),
            failures,
        }
        .into());
    }
    Ok(lines)
}

pub fn match_stage(input: &Path, output: &Path, matcher: &Matcher) -> Result<Vec<PredictionRecord>, StageError> {
    let raw: Vec<RawLine> = jsonl::read(input)?;
    let preds: Vec<PredictionRecord> = raw
        .into_iter()
        .map(|r| {
            let m = matcher.best_match(&r.raw);
            PredictionRecord {
                id: r.id,
                raw: r.raw,
                label: m.label,
                word_overlap: m.word_overlap,
                bleu: m.bleu,
                tie_broken_by: m.tie_broken_by,
            }
        })
        .collect();
    write_file(output, &jsonl::to_string(&preds))?;
    Ok(preds)
}

pub fn eval_stage(
    predictions: &Path,
    truth: &Path,
    labels: &LabelSet,
    taxonomy: &CweTaxonomy,
    missing: MissingPolicy,
    outputs: &[(ReportFormat, PathBuf)],
) -> Result<EvalReport, StageError> {
    let preds: Vec<PredictionRecord> = jsonl::read(predictions)?;
    let truth = corpus::load_dataset(truth, labels)?;
    let cm = eval::confusion(&preds, &truth, labels, missing)?;
    let report = EvalReport::build(&cm, taxonomy)?;
    for (fmt, path) in outputs {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        eval::emit_report(&report, *fmt, path)?;
    }
    Ok(report)
}

/// Matcher over the expected responses of every label.
pub fn build_matcher(
    rv: ResponseVariant,
    taxonomy: &CweTaxonomy,
    labels: &LabelSet,
) -> Result<Matcher, StageError> {
    let cands = crate::prompt::response_candidates(rv, taxonomy, labels)?;
    Ok(Matcher::new(cands)?)
}

// ---- orchestration ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: Stage,
    /// Hash of version, stage configuration and input contents.
    pub key: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLog {
    pub version: String,
    pub seed: u64,
    pub stages: Vec<StageLog>,
}

impl RunLog {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run log serializes");
        s.push('\n');
        s
    }

    fn entry(&self, stage: Stage) -> Option<&StageLog> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineOutcome {
    pub stages: Vec<(Stage, StageStatus)>,
    pub log: RunLog,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub resume: bool,
}

fn stage_key(m: &PipelineManifest, stage: Stage, inputs: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    h.update(crate::VERSION.as_bytes());
    h.update([0]);
    h.update(stage.name().as_bytes());
    h.update([0]);
    h.update(m.stage_config(stage).as_bytes());
    for (name, hash) in inputs {
        h.update([0]);
        h.update(name.as_bytes());
        h.update([0]);
        h.update(hash.as_bytes());
    }
    hex::encode(h.finalize())
}

fn hash_inputs(io: &StageIo) -> Result<BTreeMap<String, String>, StageError> {
    io.inputs
        .iter()
        .map(|f| {
            if !f.path.is_file() {
                return Err(StageError::MissingInput(f.path.clone()));
            }
            Ok((f.name.clone(), sha256_file(&f.path)?))
        })
        .collect()
}

fn outputs_match(io: &StageIo, logged: &StageLog) -> bool {
    io.outputs.len() == logged.outputs.len()
        && io.outputs.iter().all(|f| {
            logged.outputs.get(&f.name).is_some_and(|h| {
                f.path.is_file() && sha256_file(&f.path).ok().as_deref() == Some(h.as_str())
            })
        })
}

fn execute(m: &PipelineManifest, stage: Stage, io: &StageIo) -> Result<(), StageError> {
    let labels = m.labels.label_set()?;
    let out = |i: usize| io.outputs[i].path.as_path();
    let inp = |i: usize| io.inputs[i].path.as_path();
    match stage {
        Stage::Prep => {
            prep_stage(inp(0), out(0), &labels, &m.prep)?;
        }
        Stage::Split => {
            split_stage(inp(0), out(0), out(1), &labels, m.split.per_label_test, m.seed)?;
        }
        Stage::Prompt => {
            let tax = m.load_taxonomy()?;
            let builder = PromptBuilder {
                template: m.prompt.template()?,
                style: m.prompt.style(m.seed),
                response: m.prompt.response_variant()?,
                taxonomy: &tax,
                labels: &labels,
            };
            prompt_stage(inp(0), out(0), &builder)?;
            prompt_stage(inp(1), out(1), &builder)?;
        }
        Stage::Run => {
            let mut cfg = m.run.clone();
            cfg.replay_file = cfg
                .replay_file
                .as_deref()
                .map(|r| m.resolve(r).display().to_string());
            let backend = backend::from_config(&cfg)?;
            run_stage(inp(0), out(0), backend.as_ref(), cfg.concurrency_limit, cfg.failure_mode)?;
        }
        Stage::Match => {
            let tax = m.load_taxonomy()?;
            let matcher = build_matcher(m.prompt.response_variant()?, &tax, &labels)?;
            match_stage(inp(0), out(0), &matcher)?;
        }
        Stage::Eval => {
            let tax = m.load_taxonomy()?;
            let mut targets = Vec::new();
            for f in m.formats() {
                let path = match f {
                    ReportFormat::Json => m.out_path("report.json"),
                    ReportFormat::Markdown => m.out_path("report.md"),
                    ReportFormat::Csv => m.out_path("report_csv"),
                };
                targets.push((f, path));
            }
            eval_stage(inp(0), inp(1), &labels, &tax, m.eval.missing, &targets)?;
        }
    }
    Ok(())
}

/// Runs one stage without consulting or writing the run log.
pub fn execute_stage(m: &PipelineManifest, stage: Stage) -> Result<(), StageError> {
    let io = m.stage_io(stage);
    hash_inputs(&io)?;
    execute(m, stage, &io)
}

fn previous_log(m: &PipelineManifest) -> Option<RunLog> {
    let text = fs::read_to_string(m.out_path(RUN_LOG)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Runs every stage in order; see the module docs for resume semantics.
pub fn run_pipeline(m: &PipelineManifest, opts: RunOptions) -> Result<PipelineOutcome, PipelineError> {
    let previous = if opts.resume { previous_log(m) } else { None };
    let mut log = RunLog {
        version: crate::VERSION.to_string(),
        seed: m.seed,
        stages: Vec::new(),
    };
    let mut statuses = Vec::new();
    let log_path = m.out_path(RUN_LOG);

    for stage in Stage::ALL {
        let wrap = |source| PipelineError::Stage { stage, source };
        let io = m.stage_io(stage);
        let inputs = hash_inputs(&io).map_err(wrap)?;
        let key = stage_key(m, stage, &inputs);

        let reusable = previous
            .as_ref()
            .and_then(|p| p.entry(stage))
            .filter(|e| e.key == key && outputs_match(&io, e));
        let entry = match reusable {
            Some(e) => {
                statuses.push((stage, StageStatus::Skipped));
                e.clone()
            }
            None => {
                execute(m, stage, &io).map_err(wrap)?;
                let outputs = io
                    .outputs
                    .iter()
                    .map(|f| Ok((f.name.clone(), sha256_file(&f.path)?)))
                    .collect::<Result<_, StageError>>()
                    .map_err(wrap)?;
                statuses.push((stage, StageStatus::Ran));
                StageLog {
                    stage,
                    key,
                    inputs,
                    outputs,
                }
            }
        };
        log.stages.push(entry);
        write_file(&log_path, &log.to_json()).map_err(wrap)?;
    }
    Ok(PipelineOutcome {
        stages: statuses,
        log,
    })
}
