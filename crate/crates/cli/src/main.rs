//! `svi` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rust_decimal::Decimal;
use serde::Serialize;

use svi_core::backend::{self, Backend, BackendConfig, BackendKind, FailureMode, ReplayBackend};
use svi_core::cost::{self, ApiCostSpec, ArchSpec, GpuCostSpec};
use svi_core::eval::{MissingPolicy, ReportFormat};
use svi_core::pipeline::{self, PipelineManifest, RunOptions, StageError, StageStatus};
use svi_core::preprocess::PreprocessConfig;
use svi_core::prompt::{Placement, PromptBuilder, PromptStyle, PromptTemplate, ResponseVariant, StyleKind, TemplateName};
use svi_core::taxonomy::{self, DistanceOptions};
use svi_core::{CweId, CweTaxonomy, LabelSet};

const USAGE: u8 = 1;
const DATA: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "svi", version = svi_core::VERSION, about = "CWE-level vulnerability identification pipeline")]
struct Cli {
    /// Run the full pipeline described by this TOML manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Skip pipeline stages whose inputs are unchanged since the last run.
    #[arg(long, global = true)]
    resume: bool,
    /// Seed for splitting and mixed prompts (overrides the manifest).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Strip comments and normalize whitespace in a dataset.
    Prep(PrepArgs),
    /// Seeded stratified train/test split.
    Split(SplitArgs),
    /// Build prompt/expected-response pairs.
    Prompt(PromptArgs),
    /// Query a backend for every prompt.
    Run(RunArgs),
    /// Map raw model output to labels.
    Match(MatchArgs),
    /// Compute metrics and write a report.
    Eval(EvalArgs),
    /// Print the hierarchical distance matrix as CSV.
    Distance(DistanceArgs),
    /// Cost and compute estimates.
    #[command(subcommand)]
    Cost(CostCommand),
}

#[derive(Args, Debug)]
struct LabelArgs {
    /// Comma-separated CWE ids (default: the nine built-in labels).
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<u32>>,
    /// Expected response for benign samples.
    #[arg(long)]
    benign_response: Option<String>,
}

impl LabelArgs {
    fn label_set(&self) -> Result<LabelSet, Failure> {
        pipeline::LabelsConfig {
            cwes: self.labels.clone(),
            benign_response: self.benign_response.clone(),
        }
        .label_set()
        .map_err(Failure::usage)
    }
}

#[derive(Args, Debug)]
struct TaxonomyArgs {
    /// CWE taxonomy JSON with descriptions and ChildOf edges (default: bundled).
    #[arg(long, visible_alias = "descriptions")]
    taxonomy: Option<PathBuf>,
}

impl TaxonomyArgs {
    fn load(&self) -> Result<CweTaxonomy, Failure> {
        match &self.taxonomy {
            Some(p) => taxonomy::load_taxonomy(p).map_err(Failure::data),
            None => Ok(CweTaxonomy::bundled()),
        }
    }
}

#[derive(Args, Debug)]
struct PrepArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    keep_comments: bool,
    /// Keep line structure; only trim indentation.
    #[arg(long)]
    keep_newlines: bool,
    #[command(flatten)]
    labels: LabelArgs,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Test samples drawn per label.
    #[arg(long)]
    per_label: usize,
    #[command(flatten)]
    labels: LabelArgs,
}

#[derive(Args, Debug)]
struct PromptArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// simple, cpp, codet5 or descriptive.
    #[arg(long, default_value = "simple")]
    template: String,
    /// Custom template text containing [CODE] once.
    #[arg(long)]
    template_text: Option<String>,
    /// hard, soft or mixed.
    #[arg(long, default_value = "hard")]
    style: String,
    #[arg(long)]
    soft_token: Option<String>,
    /// Mixed style: number of soft tokens to insert.
    #[arg(long)]
    insertions: Option<usize>,
    /// Mixed style: allow several soft tokens at one word boundary.
    #[arg(long)]
    with_replacement: bool,
    /// desc, id or id+desc.
    #[arg(long, default_value = "desc")]
    response: String,
    #[command(flatten)]
    labels: LabelArgs,
    #[command(flatten)]
    taxonomy: TaxonomyArgs,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Prompt JSONL.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Serve canned responses from this JSONL file ({"id","raw"} per line).
    #[arg(long, conflicts_with = "endpoint")]
    replay: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible server.
    #[arg(long, required_unless_present = "replay")]
    endpoint: Option<String>,
    #[arg(long, default_value = "")]
    model: String,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 64)]
    max_tokens: u32,
    #[arg(long, default_value_t = 60_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Environment variable holding the API key.
    #[arg(long, default_value = backend::DEFAULT_API_KEY_ENV)]
    api_key_env: String,
    /// Abort on the first failed sample.
    #[arg(long)]
    fail_fast: bool,
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// Raw output JSONL.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Response variant used when building prompts.
    #[arg(long, default_value = "desc")]
    response: String,
    #[command(flatten)]
    labels: LabelArgs,
    #[command(flatten)]
    taxonomy: TaxonomyArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Ground-truth dataset JSONL.
    #[arg(long)]
    truth: PathBuf,
    /// json, markdown or csv (csv writes a directory).
    #[arg(long, default_value = "json")]
    format: String,
    /// Output path; json and markdown go to stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Count samples without a prediction as abstentions instead of failing.
    #[arg(long)]
    abstain: bool,
    #[command(flatten)]
    labels: LabelArgs,
    #[command(flatten)]
    taxonomy: TaxonomyArgs,
}

#[derive(Args, Debug)]
struct DistanceArgs {
    /// Comma-separated CWE ids (default: the nine built-in labels).
    #[arg(long, value_delimiter = ',')]
    cwes: Option<Vec<u32>>,
    /// Let shortest paths pass through Category nodes.
    #[arg(long)]
    include_categories: bool,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    taxonomy: TaxonomyArgs,
}

#[derive(Subcommand, Debug)]
enum CostCommand {
    /// hours x GPUs x hourly rate.
    Gpu {
        #[arg(long)]
        hours: Decimal,
        #[arg(long)]
        gpus: u32,
        /// Price per GPU-hour.
        #[arg(long)]
        rate: Decimal,
    },
    /// Token-priced API cost; prices are per million tokens.
    Api {
        #[arg(long)]
        in_tokens: u64,
        #[arg(long)]
        out_tokens: u64,
        #[arg(long)]
        price_in: Decimal,
        #[arg(long)]
        price_out: Decimal,
    },
    /// Forward-pass FLOPs and MACs (2 x params x sequence length).
    Flops {
        #[arg(long)]
        params: u64,
        #[arg(long)]
        seq: u64,
        #[arg(long, default_value = "model")]
        name: String,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Self {
            code: USAGE,
            message: e.to_string(),
        }
    }

    fn data(e: impl std::fmt::Display) -> Self {
        Self {
            code: DATA,
            message: e.to_string(),
        }
    }

    fn stage(stage: &str, e: StageError) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: format!("stage {stage}: {e}"),
        }
    }
}

struct Ctx {
    quiet: bool,
    seed: u64,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let ctx = Ctx {
        quiet: cli.quiet,
        seed: cli.seed.unwrap_or(0),
    };
    match (cli.command, cli.manifest) {
        (None, Some(path)) => run_manifest(&path, cli.seed, cli.resume, &ctx),
        (None, None) => Err(Failure::usage(
            "nothing to do: pass --manifest <file> or a subcommand (see --help)",
        )),
        (Some(_), Some(_)) => Err(Failure::usage("--manifest cannot be combined with a subcommand")),
        (Some(cmd), None) => run_command(cmd, &ctx),
    }
}

fn run_manifest(path: &Path, seed: Option<u64>, resume: bool, ctx: &Ctx) -> Result<(), Failure> {
    let mut m = PipelineManifest::load(path).map_err(Failure::usage)?;
    if let Some(s) = seed {
        m.seed = s;
    }
    let outcome = pipeline::run_pipeline(&m, RunOptions { resume }).map_err(|e| Failure {
        code: e.exit_code() as u8,
        message: e.to_string(),
    })?;
    for (stage, status) in outcome.stages {
        let word = match status {
            StageStatus::Ran => "done",
            StageStatus::Skipped => "up to date, skipped",
        };
        ctx.note(format!("{stage}: {word}"));
    }
    Ok(())
}

fn run_command(cmd: Command, ctx: &Ctx) -> Result<(), Failure> {
    match cmd {
        Command::Prep(a) => {
            let cfg = PreprocessConfig {
                strip_comments: !a.keep_comments,
                collapse_whitespace: !a.keep_newlines,
                normalize_indent: true,
            };
            let d = pipeline::prep_stage(&a.input, &a.output, &a.labels.label_set()?, &cfg)
                .map_err(|e| Failure::stage("prep", e))?;
            ctx.note(format!("prep: {} samples", d.len()));
        }
        Command::Split(a) => {
            let (train, test) = pipeline::split_stage(
                &a.input,
                &a.train,
                &a.test,
                &a.labels.label_set()?,
                a.per_label,
                ctx.seed,
            )
            .map_err(|e| Failure::stage("split", e))?;
            ctx.note(format!("split: {} train, {} test", train.len(), test.len()));
        }
        Command::Prompt(a) => {
            let name: TemplateName = a.template.parse().map_err(Failure::usage)?;
            let template = match a.template_text {
                Some(t) => PromptTemplate::new(name, t).map_err(Failure::usage)?,
                None => PromptTemplate::builtin(name),
            };
            let kind: StyleKind = a.style.parse().map_err(Failure::usage)?;
            let mut style = PromptStyle::new(kind);
            style.seed = ctx.seed;
            if let Some(t) = a.soft_token {
                style.soft_token = t;
            }
            style.insertions = a.insertions;
            if a.with_replacement {
                style.placement = Placement::WithReplacement;
            }
            let labels = a.labels.label_set()?;
            let tax = a.taxonomy.load()?;
            let builder = PromptBuilder {
                template,
                style,
                response: a.response.parse::<ResponseVariant>().map_err(Failure::usage)?,
                taxonomy: &tax,
                labels: &labels,
            };
            let lines = pipeline::prompt_stage(&a.input, &a.output, &builder)
                .map_err(|e| Failure::stage("prompt", e))?;
            ctx.note(format!("prompt: {} records", lines.len()));
        }
        Command::Run(a) => {
            if a.concurrency == 0 {
                return Err(Failure::usage("--concurrency must be at least 1"));
            }
            let mode = if a.fail_fast {
                FailureMode::FailFast
            } else {
                FailureMode::Collect
            };
            let backend: Box<dyn Backend> = match &a.replay {
                Some(p) => Box::new(ReplayBackend::load(p).map_err(Failure::data)?),
                None => {
                    let cfg = BackendConfig {
                        kind: BackendKind::Http,
                        endpoint: a.endpoint.clone(),
                        model_name: a.model.clone(),
                        temperature: a.temperature,
                        max_output_tokens: a.max_tokens,
                        timeout: Duration::from_millis(a.timeout_ms),
                        max_retries: a.max_retries,
                        concurrency_limit: a.concurrency,
                        api_key_env: a.api_key_env.clone(),
                        failure_mode: mode,
                        ..Default::default()
                    };
                    Box::new(backend::HttpBackend::new(&cfg).map_err(Failure::usage)?)
                }
            };
            let lines = pipeline::run_stage(&a.input, &a.output, backend.as_ref(), a.concurrency, mode)
                .map_err(|e| Failure::stage("run", e))?;
            ctx.note(format!("run: {} responses", lines.len()));
        }
        Command::Match(a) => {
            let rv: ResponseVariant = a.response.parse().map_err(Failure::usage)?;
            let matcher = pipeline::build_matcher(rv, &a.taxonomy.load()?, &a.labels.label_set()?)
                .map_err(|e| Failure::stage("match", e))?;
            let preds = pipeline::match_stage(&a.input, &a.output, &matcher)
                .map_err(|e| Failure::stage("match", e))?;
            ctx.note(format!("match: {} predictions", preds.len()));
        }
        Command::Eval(a) => run_eval(a)?,
        Command::Distance(a) => {
            let tax = a.taxonomy.load()?;
            let ids: Vec<CweId> = match a.cwes {
                Some(v) => v.into_iter().map(CweId).collect(),
                None => LabelSet::default().cwes().to_vec(),
            };
            let opts = DistanceOptions {
                include_categories: a.include_categories,
            };
            let csv = tax.distance_matrix_with(&ids, opts).map_err(Failure::data)?.to_csv();
            emit(a.output.as_deref(), &csv)?;
        }
        Command::Cost(c) => print!("{}", cost_json(c)?),
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<(), Failure> {
    let format = pipeline::parse_format(&a.format)
        .ok_or_else(|| Failure::usage(format!("unknown report format {:?}", a.format)))?;
    let missing = if a.abstain {
        MissingPolicy::Abstain
    } else {
        MissingPolicy::Error
    };
    let targets: Vec<(ReportFormat, PathBuf)> = match (&a.output, format) {
        (Some(p), f) => vec![(f, p.clone())],
        (None, ReportFormat::Csv) => return Err(Failure::usage("--format csv needs --output <dir>")),
        (None, _) => Vec::new(),
    };
    let report = pipeline::eval_stage(
        &a.predictions,
        &a.truth,
        &a.labels.label_set()?,
        &a.taxonomy.load()?,
        missing,
        &targets,
    )
    .map_err(|e| Failure::stage("eval", e))?;
    if a.output.is_none() {
        match format {
            ReportFormat::Markdown => print!("{}", report.to_markdown()),
            _ => print!("{}", report.to_json()),
        }
    }
    Ok(())
}

fn emit(path: Option<&Path>, body: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, body).map_err(|e| Failure::data(format!("{}: {e}", p.display()))),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct GpuRow {
    hours: String,
    gpus: u32,
    rate_per_gpu_hour: String,
    cost: String,
}

#[derive(Serialize)]
struct ApiRow {
    prompt_tokens: u64,
    completion_tokens: u64,
    price_in_per_million: String,
    price_out_per_million: String,
    cost: String,
}

#[derive(Serialize)]
struct FlopsRow {
    model: String,
    parameters: u64,
    sequence_length: u64,
    flops: u128,
    macs: u128,
    flops_sci: String,
    macs_sci: String,
}

fn cost_json(c: CostCommand) -> Result<String, Failure> {
    let mut out = match c {
        CostCommand::Gpu { hours, gpus, rate } => {
            let s = GpuCostSpec::new(hours, gpus, rate).map_err(Failure::usage)?;
            serde_json::to_string_pretty(&GpuRow {
                hours: hours.to_string(),
                gpus,
                rate_per_gpu_hour: rate.to_string(),
                cost: cost::gpu_cost(&s).to_string(),
            })
        }
        CostCommand::Api {
            in_tokens,
            out_tokens,
            price_in,
            price_out,
        } => {
            let s = ApiCostSpec::new(in_tokens, out_tokens, price_in, price_out).map_err(Failure::usage)?;
            serde_json::to_string_pretty(&ApiRow {
                prompt_tokens: in_tokens,
                completion_tokens: out_tokens,
                price_in_per_million: price_in.to_string(),
                price_out_per_million: price_out.to_string(),
                cost: cost::api_cost(&s).to_string(),
            })
        }
        CostCommand::Flops { params, seq, name } => {
            let a = ArchSpec::new(name.clone(), params, seq).map_err(Failure::usage)?;
            let c = cost::flops_macs(&a);
            serde_json::to_string_pretty(&FlopsRow {
                model: name,
                parameters: params,
                sequence_length: seq,
                flops: c.flops,
                macs: c.macs,
                flops_sci: cost::format_sci(c.flops),
                macs_sci: cost::format_sci(c.macs),
            })
        }
    }
    .expect("rows serialize");
    out.push('\n');
    Ok(out)
}
