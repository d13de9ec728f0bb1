//! `instrexp` command line: one subcommand per pipeline stage plus
//! `pipeline`, which chains them from a single config file.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{build_dataset, BuildConfig, DatasetError};
use crate::expand::{parse_ladder, ExpandError, Expander, ExpansionConfig, ExpansionMode, GenerationCandidate, Journal};
use crate::filter::{run_pipeline, DedupScope, FilterConfig};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl, JsonlError};
use crate::llm::{
    bootstrap_guiding_instructions, read_guiding_file, ChatBackend, Gateway, GuidingInstruction, HttpBackend, LlmError,
    MockBackend, PromptOptions, RetryPolicy, DEFAULT_CONCURRENCY, DEFAULT_MAX_TOKENS,
};
use crate::manifest::{write_manifest, RunManifest};
use crate::ppg::{mask_placeholders, MaskMap, MatchMode};
use crate::sampler::{
    build_distribution, resolve_epsilon, score_pools, Embedder, EpsilonMode, HttpEmbedder, SamplerError, StubEmbedder,
    TaskPool, DEFAULT_N_SIBLINGS, STUB_DIM,
};
use crate::seed::stream_rng;
use crate::stats::{corpus_stats, task_attributes, CorpusStats, TaskAttributes};
use crate::template::{InstanceRecord, InstructionTemplate, Origin, TaskAnnotations, TemplateLine};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data(_) => EXIT_DATA,
            Self::Backend(_) => EXIT_BACKEND,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Data(_) => "data",
            Self::Backend(_) => "backend",
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Backend(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

impl From<JsonlError> for CliError {
    fn from(e: JsonlError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::InvalidRequest(m) => Self::Usage(m),
            other => Self::Backend(other.to_string()),
        }
    }
}

impl From<ExpandError> for CliError {
    fn from(e: ExpandError) -> Self {
        match e {
            ExpandError::Llm(l) => l.into(),
            ExpandError::Precondition(m) => Self::Usage(m),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::BackendUnavailable(_) => Self::Backend(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Sampler(s) => s.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "instrexp", version, about = "Instruction template expansion and dataset building")]
struct Cli {
    /// TOML or JSON file supplying defaults for every flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print errors as one JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    /// Maximum concurrent backend requests.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ask the LLM for rewriting directives.
    Bootstrap(BootstrapArgs),
    /// Rewrite raw templates with the LLM and filter the results.
    Expand(ExpandArgs),
    /// Re-run the post-filters over a candidates file.
    Filter(FilterArgs),
    /// Score generated templates per task.
    Score(ScoreArgs),
    /// Turn scored pools into sampling distributions.
    Dist(DistArgs),
    /// Instantiate the final dataset.
    Build(BuildArgs),
    /// Corpus statistics and task attributes.
    Stats(StatsArgs),
    /// Run every stage from one config file.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args, Default)]
struct LlmArgs {
    /// mock | http
    #[arg(long)]
    backend: Option<String>,
    /// Mock fixture JSONL.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    retries: Option<u32>,
    /// Minimum milliseconds between request starts.
    #[arg(long)]
    min_interval_ms: Option<u64>,
    /// Normalize the bootstrap meta-prompt's spelling.
    #[arg(long)]
    fix_typos: bool,
}

#[derive(Debug, Args, Default)]
struct FilterFlags {
    /// unordered | ordered
    #[arg(long = "match")]
    match_mode: Option<String>,
    #[arg(long)]
    no_length_filter: bool,
    #[arg(long)]
    ratio_cap: Option<f64>,
    #[arg(long)]
    word_cap: Option<usize>,
    /// per_task | global
    #[arg(long)]
    dedup_scope: Option<String>,
}

#[derive(Debug, Args)]
struct BootstrapArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Debug, Args)]
struct ExpandArgs {
    /// single | iter | mt
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
    /// start:end:step
    #[arg(long)]
    ladder: Option<String>,
    #[arg(long)]
    target_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    guiding: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the filter report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write each raw template's mask map as JSON.
    #[arg(long)]
    dump_masks: Option<PathBuf>,
    #[command(flatten)]
    llm: LlmArgs,
    #[command(flatten)]
    filter: FilterFlags,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    filter: FilterFlags,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    n_siblings: Option<usize>,
    /// stub | http
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DistArgs {
    #[arg(long)]
    pools: PathBuf,
    /// default | fixed:F | half | double | scaled:F
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    softmax_temp: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[arg(long)]
    instances: Option<PathBuf>,
    #[arg(long)]
    dist: PathBuf,
    /// Template files (raw and generated); repeatable.
    #[arg(long, required = true)]
    templates: Vec<PathBuf>,
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Template files; repeatable.
    #[arg(long, required = true)]
    templates: Vec<PathBuf>,
    #[arg(long)]
    instances: Option<PathBuf>,
    #[arg(long)]
    sample_cap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    llm: LlmArgs,
}

/// Optional defaults read from `--config`. Relative paths resolve against
/// the config file's directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub instances: Option<PathBuf>,
    pub guiding: Option<PathBuf>,
    pub llm: LlmSection,
    pub bootstrap: BootstrapSection,
    pub expand: ExpandSection,
    pub filter: FilterSection,
    pub score: ScoreSection,
    pub dist: DistSection,
    pub build: BuildSection,
    pub stats: StatsSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub backend: Option<String>,
    pub fixtures: Option<PathBuf>,
    pub model: Option<String>,
    pub max_tokens: Option<u32>,
    pub retries: Option<u32>,
    pub min_interval_ms: Option<u64>,
    pub fix_typos: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub count: Option<usize>,
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpandSection {
    pub mode: Option<String>,
    pub iterations: Option<u32>,
    pub temperature: Option<f64>,
    pub ladder: Option<String>,
    pub target_count: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    #[serde(rename = "match")]
    pub match_mode: Option<String>,
    pub length_filter: Option<bool>,
    pub ratio_cap: Option<f64>,
    pub word_cap: Option<usize>,
    pub dedup_scope: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub embedder: Option<String>,
    pub n_siblings: Option<usize>,
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistSection {
    pub epsilon: Option<String>,
    pub softmax_temp: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildSection {
    pub cap: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub sample_cap: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p.as_mut() {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        fix(&mut cfg.out_dir);
        fix(&mut cfg.templates);
        fix(&mut cfg.instances);
        fix(&mut cfg.guiding);
        fix(&mut cfg.llm.fixtures);
        Ok(cfg)
    }
}

struct Ctx {
    cfg: RunConfig,
    config_path: Option<PathBuf>,
    jobs: usize,
}

fn require_path(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| fallback.clone()).ok_or_else(|| CliError::Usage(format!("--{name} is required")))
}

fn existing(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("input file not found: {}", path.display())))
    }
}

impl Ctx {
    fn manifest(&self, command: &str, snapshot: serde_json::Value, seed: u64, inputs: &[&Path]) -> CliResult<RunManifest> {
        let mut m = RunManifest::new(command, snapshot, seed);
        for p in inputs {
            m.add_input(p)?;
        }
        if let Some(c) = &self.config_path {
            m.add_input(c)?;
        }
        Ok(m)
    }

    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.cfg.seed).unwrap_or(42)
    }

    fn filter_config(&self, f: &FilterFlags) -> CliResult<FilterConfig> {
        let s = &self.cfg.filter;
        let match_mode = match f.match_mode.as_deref().or(s.match_mode.as_deref()).unwrap_or("unordered") {
            "unordered" => MatchMode::Unordered,
            "ordered" => MatchMode::Ordered,
            other => return Err(CliError::Usage(format!("unknown match mode `{other}`"))),
        };
        let dedup_scope = match f.dedup_scope.as_deref().or(s.dedup_scope.as_deref()).unwrap_or("per_task") {
            "per_task" | "per-task" => DedupScope::PerTask,
            "global" => DedupScope::Global,
            other => return Err(CliError::Usage(format!("unknown dedup scope `{other}`"))),
        };
        let defaults = FilterConfig::default();
        let cfg = FilterConfig {
            match_mode,
            length_filter_enabled: !f.no_length_filter && s.length_filter.unwrap_or(true),
            length_ratio_cap: f.ratio_cap.or(s.ratio_cap).unwrap_or(defaults.length_ratio_cap),
            absolute_word_cap: f.word_cap.or(s.word_cap).unwrap_or(defaults.absolute_word_cap),
            dedup_scope,
        };
        cfg.validate().map_err(CliError::Usage)?;
        Ok(cfg)
    }

    /// Resolved LLM settings plus the fixture path, if any.
    fn llm_settings(&self, a: &LlmArgs) -> CliResult<LlmSettings> {
        let s = &self.cfg.llm;
        let backend = a.backend.clone().or_else(|| s.backend.clone()).unwrap_or_else(|| "http".into());
        let fixtures = a.fixtures.clone().or_else(|| s.fixtures.clone());
        if !matches!(backend.as_str(), "mock" | "http") {
            return Err(CliError::Usage(format!("unknown backend `{backend}` (mock|http)")));
        }
        if backend == "mock" && fixtures.is_none() {
            return Err(CliError::Usage("--backend mock needs --fixtures".into()));
        }
        Ok(LlmSettings {
            backend,
            fixtures,
            model: a.model.clone().or_else(|| s.model.clone()).unwrap_or_default(),
            max_tokens: a.max_tokens.or(s.max_tokens).unwrap_or(DEFAULT_MAX_TOKENS),
            retries: a.retries.or(s.retries).unwrap_or(3),
            min_interval_ms: a.min_interval_ms.or(s.min_interval_ms).unwrap_or(0),
            fix_typos: a.fix_typos || s.fix_typos.unwrap_or(false),
            jobs: self.jobs,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
struct LlmSettings {
    backend: String,
    fixtures: Option<PathBuf>,
    model: String,
    max_tokens: u32,
    retries: u32,
    min_interval_ms: u64,
    fix_typos: bool,
    jobs: usize,
}

impl LlmSettings {
    fn gateway(&self) -> CliResult<Gateway> {
        let backend: Box<dyn ChatBackend> = match self.backend.as_str() {
            "mock" => {
                let path = self.fixtures.as_ref().expect("checked when resolving");
                existing(path)?;
                Box::new(MockBackend::from_jsonl(path)?)
            }
            _ => Box::new(HttpBackend::from_env()?),
        };
        let retry = if self.backend == "mock" {
            RetryPolicy::immediate(self.retries)
        } else {
            RetryPolicy { max_retries: self.retries, ..RetryPolicy::default() }
        };
        Ok(Gateway::new(backend)
            .with_retry(retry)
            .with_concurrency(self.jobs)
            .with_min_interval(Duration::from_millis(self.min_interval_ms))
            .with_model(self.model.clone())
            .with_max_tokens(self.max_tokens))
    }

    fn inputs(&self) -> Vec<&Path> {
        self.fixtures.iter().map(PathBuf::as_path).collect()
    }
}

/// Reads template files, rejecting duplicate ids. Annotations are merged per task.
pub fn read_templates(paths: &[PathBuf]) -> CliResult<(Vec<InstructionTemplate>, BTreeMap<String, TaskAnnotations>)> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut annotations: BTreeMap<String, TaskAnnotations> = BTreeMap::new();
    for path in paths {
        existing(path)?;
        let lines: Vec<TemplateLine> = read_jsonl(path)?;
        for line in lines {
            if !seen.insert(line.template_id.clone()) {
                return Err(CliError::Data(format!("{}: duplicate template id `{}`", path.display(), line.template_id)));
            }
            if let Some(a) = &line.attributes {
                let e = annotations.entry(line.task_id.clone()).or_default();
                e.direct_question = e.direct_question.or(a.direct_question);
                e.option_inclusive = e.option_inclusive.or(a.option_inclusive);
            }
            out.push(line.to_template().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?);
        }
    }
    Ok((out, annotations))
}

fn read_instances(path: &Path) -> CliResult<Vec<InstanceRecord>> {
    existing(path)?;
    let records: Vec<InstanceRecord> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for r in &records {
        r.validate().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if !seen.insert((r.task_id.clone(), r.instance_id.clone())) {
            return Err(CliError::Data(format!("{}: duplicate instance id `{}`", path.display(), r.instance_id)));
        }
    }
    Ok(records)
}

fn template_lines(templates: &[InstructionTemplate]) -> Vec<TemplateLine> {
    templates.iter().map(TemplateLine::from).collect()
}

fn valid_templates(candidates: &[GenerationCandidate]) -> CliResult<Vec<InstructionTemplate>> {
    candidates
        .iter()
        .map(|c| c.to_template().map_err(|e| CliError::Data(format!("candidate `{}`: {e}", c.candidate_id))))
        .collect()
}

fn expansion_config(ctx: &Ctx, a: &ExpandArgs) -> CliResult<ExpansionConfig> {
    expansion_config_from(ctx, a.mode.as_deref(), a.iterations, a.temperature, a.ladder.as_deref(), a.target_count, a.seed)
}

fn expansion_config_from(
    ctx: &Ctx,
    mode: Option<&str>,
    iterations: Option<u32>,
    temperature: Option<f64>,
    ladder: Option<&str>,
    target_count: Option<usize>,
    seed: Option<u64>,
) -> CliResult<ExpansionConfig> {
    let s = &ctx.cfg.expand;
    let defaults = ExpansionConfig::default();
    let mode: ExpansionMode = mode.or(s.mode.as_deref()).unwrap_or("single").parse().map_err(CliError::Usage)?;
    let temperature_ladder = match ladder.or(s.ladder.as_deref()) {
        Some(spec) => parse_ladder(spec).map_err(CliError::Usage)?,
        None => defaults.temperature_ladder,
    };
    let cfg = ExpansionConfig {
        mode,
        iterations: iterations.or(s.iterations).unwrap_or(defaults.iterations),
        temperature: temperature.or(s.temperature).unwrap_or(defaults.temperature),
        temperature_ladder,
        target_count: target_count.or(s.target_count),
        seed: ctx.seed(seed),
    };
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn embedder(ctx: &Ctx, flag: Option<&str>) -> CliResult<(String, Box<dyn Embedder>)> {
    let name = flag.or(ctx.cfg.score.embedder.as_deref()).unwrap_or("stub").to_string();
    let e: Box<dyn Embedder> = match name.as_str() {
        "stub" => Box::new(StubEmbedder::new(ctx.cfg.score.dim.unwrap_or(STUB_DIM))),
        "http" => Box::new(HttpEmbedder::from_env()?),
        other => return Err(CliError::Usage(format!("unknown embedder `{other}` (stub|http)"))),
    };
    Ok((name, e))
}

fn distributions(pools: &[TaskPool], mode: EpsilonMode, softmax_temp: f64) -> CliResult<Vec<TaskPool>> {
    pools
        .iter()
        .map(|p| {
            let eps = resolve_epsilon(mode, p)?;
            Ok(build_distribution(p, eps, softmax_temp)?)
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct StatsOutput {
    corpus: CorpusStats,
    raw: CorpusStats,
    generated: CorpusStats,
    tasks: Vec<TaskAttributes>,
}

fn compute_stats(
    templates: &[InstructionTemplate],
    annotations: &BTreeMap<String, TaskAnnotations>,
    instances: Option<&[InstanceRecord]>,
    sample_cap: usize,
    seed: u64,
) -> StatsOutput {
    let (raw, generated): (Vec<_>, Vec<_>) = templates.iter().cloned().partition(|t| t.origin == Origin::Raw);
    let mut tasks = Vec::new();
    if let Some(instances) = instances {
        let mut by_task: BTreeMap<&str, Vec<InstructionTemplate>> = BTreeMap::new();
        for t in templates {
            by_task.entry(t.task_id.as_str()).or_default().push(t.clone());
        }
        for (task, ts) in by_task {
            let insts: Vec<InstanceRecord> = instances.iter().filter(|i| i.task_id == task).cloned().collect();
            let mut rng = stream_rng(seed, task);
            tasks.push(task_attributes(task, &ts, &insts, annotations.get(task), sample_cap, &mut rng));
        }
    }
    StatsOutput { corpus: corpus_stats(templates), raw: corpus_stats(&raw), generated: corpus_stats(&generated), tasks }
}

fn write_manifests<const N: usize>(outputs: [Option<&Path>; N], m: &RunManifest) -> CliResult<()> {
    for p in outputs.into_iter().flatten() {
        write_manifest(p, m)?;
    }
    Ok(())
}

fn cmd_bootstrap(ctx: &Ctx, a: BootstrapArgs) -> CliResult<()> {
    let llm = ctx.llm_settings(&a.llm)?;
    let count = a.count.or(ctx.cfg.bootstrap.count).unwrap_or(10);
    let temperature = a.temperature.or(ctx.cfg.bootstrap.temperature).unwrap_or(0.6);
    let gateway = llm.gateway()?;
    let items =
        bootstrap_guiding_instructions(&gateway, count, temperature, PromptOptions { fix_typos: llm.fix_typos })?;
    write_jsonl(&a.out, &items)?;
    let snapshot = json!({ "count": count, "temperature": temperature, "llm": llm });
    write_manifest(&a.out, &ctx.manifest("bootstrap", snapshot, ctx.seed(None), &llm.inputs())?)?;
    Ok(())
}

fn dump_masks(path: &Path, templates: &[InstructionTemplate]) -> CliResult<()> {
    let mut maps: BTreeMap<String, MaskMap> = BTreeMap::new();
    for t in templates {
        let (_, m) = mask_placeholders(t).map_err(|e| CliError::Data(e.to_string()))?;
        maps.insert(t.template_id.clone(), m);
    }
    Ok(write_json(path, &maps)?)
}

fn cmd_expand(ctx: &Ctx, a: ExpandArgs) -> CliResult<()> {
    let templates_path = require_path(a.templates.clone(), &ctx.cfg.templates, "templates")?;
    let guiding_path = require_path(a.guiding.clone(), &ctx.cfg.guiding, "guiding")?;
    let cfg = expansion_config(ctx, &a)?;
    let filter = ctx.filter_config(&a.filter)?;
    let llm = ctx.llm_settings(&a.llm)?;
    let (templates, _) = read_templates(std::slice::from_ref(&templates_path))?;
    existing(&guiding_path)?;
    let guiding = read_guiding_file(&guiding_path)?;
    if let Some(p) = &a.dump_masks {
        dump_masks(p, &templates)?;
    }
    let gateway = llm.gateway()?;
    let journal = Journal::open(&journal_path(&a.out))?;
    let outcome = Expander::new(&gateway, filter.clone()).with_journal(journal).expand(&templates, &guiding, &cfg)?;
    write_jsonl(&a.out, &outcome.candidates)?;
    if let Some(r) = &a.report {
        write_json(r, &outcome.report)?;
    }
    let snapshot = json!({ "expand": cfg, "filter": filter, "llm": llm });
    let mut inputs = vec![templates_path.as_path(), guiding_path.as_path()];
    inputs.extend(llm.inputs());
    let m = ctx.manifest("expand", snapshot, cfg.seed, &inputs)?;
    write_manifests([Some(a.out.as_path()), a.report.as_deref(), a.dump_masks.as_deref()], &m)?;
    eprintln!(
        "expand: {} requests, {} passes, {} candidates, {} valid",
        outcome.requests,
        outcome.passes,
        outcome.candidates.len(),
        outcome.report.total.valid
    );
    Ok(())
}

/// `<out>.journal`
pub fn journal_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".journal");
    out.with_file_name(name)
}

fn cmd_filter(ctx: &Ctx, a: FilterArgs) -> CliResult<()> {
    let templates_path = require_path(a.templates.clone(), &ctx.cfg.templates, "templates")?;
    let filter = ctx.filter_config(&a.filter)?;
    existing(&a.input)?;
    let mut candidates: Vec<GenerationCandidate> = read_jsonl(&a.input)?;
    let (raw, _) = read_templates(std::slice::from_ref(&templates_path))?;
    let raw: Vec<_> = raw.into_iter().filter(|t| t.origin == Origin::Raw).collect();
    let (valid, report) = run_pipeline(&mut candidates, &raw, &filter);
    write_jsonl(&a.out, &template_lines(&valid_templates(&valid)?))?;
    if let Some(r) = &a.report {
        write_json(r, &report)?;
    }
    let snapshot = json!({ "filter": filter });
    let m = ctx.manifest("filter", snapshot, ctx.seed(None), &[&a.input, &templates_path])?;
    write_manifests([Some(a.out.as_path()), a.report.as_deref()], &m)?;
    Ok(())
}

fn cmd_score(ctx: &Ctx, a: ScoreArgs) -> CliResult<()> {
    let templates_path = require_path(a.templates.clone(), &ctx.cfg.templates, "templates")?;
    let n_siblings = a.n_siblings.or(ctx.cfg.score.n_siblings).unwrap_or(DEFAULT_N_SIBLINGS);
    let seed = ctx.seed(a.seed);
    let (raw, _) = read_templates(std::slice::from_ref(&templates_path))?;
    let (generated, _) = read_templates(std::slice::from_ref(&a.valid))?;
    let (name, emb) = embedder(ctx, a.embedder.as_deref())?;
    let pools = score_pools(&raw, &generated, emb.as_ref(), n_siblings, seed)?;
    write_json(&a.out, &pools)?;
    let snapshot = json!({ "n_siblings": n_siblings, "embedder": name });
    write_manifest(&a.out, &ctx.manifest("score", snapshot, seed, &[&a.valid, &templates_path])?)?;
    Ok(())
}

fn epsilon_mode(ctx: &Ctx, flag: Option<&str>) -> CliResult<EpsilonMode> {
    flag.or(ctx.cfg.dist.epsilon.as_deref()).unwrap_or("default").parse().map_err(CliError::Usage)
}

fn cmd_dist(ctx: &Ctx, a: DistArgs) -> CliResult<()> {
    let mode = epsilon_mode(ctx, a.epsilon.as_deref())?;
    let softmax_temp = a.softmax_temp.or(ctx.cfg.dist.softmax_temp).unwrap_or(1.0);
    existing(&a.pools)?;
    let pools: Vec<TaskPool> = read_json(&a.pools)?;
    let dist = distributions(&pools, mode, softmax_temp)?;
    write_json(&a.out, &dist)?;
    let snapshot = json!({ "epsilon": mode, "softmax_temp": softmax_temp });
    write_manifest(&a.out, &ctx.manifest("dist", snapshot, ctx.seed(None), &[&a.pools])?)?;
    Ok(())
}

fn cmd_build(ctx: &Ctx, a: BuildArgs) -> CliResult<()> {
    let instances_path = require_path(a.instances.clone(), &ctx.cfg.instances, "instances")?;
    let cfg = BuildConfig {
        per_task_cap: a.cap.or(ctx.cfg.build.cap).unwrap_or(1000),
        seed: ctx.seed(a.seed),
        epsilon_mode: epsilon_mode(ctx, None)?,
    };
    if cfg.per_task_cap == 0 {
        return Err(CliError::Usage("--cap must be at least 1".into()));
    }
    let instances = read_instances(&instances_path)?;
    existing(&a.dist)?;
    let pools: Vec<TaskPool> = read_json(&a.dist)?;
    let (templates, _) = read_templates(&a.templates)?;
    let (records, report) = build_dataset(&instances, &pools, &templates, &cfg)?;
    crate::dataset::write_jsonl(&records, &a.out)?;
    if let Some(r) = &a.report {
        write_json(r, &report)?;
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let mut inputs: Vec<&Path> = vec![&instances_path, &a.dist];
    inputs.extend(a.templates.iter().map(PathBuf::as_path));
    let m = ctx.manifest("build", json!({ "build": cfg }), cfg.seed, &inputs)?;
    write_manifests([Some(a.out.as_path()), a.report.as_deref()], &m)?;
    Ok(())
}

fn cmd_stats(ctx: &Ctx, a: StatsArgs) -> CliResult<()> {
    let (templates, annotations) = read_templates(&a.templates)?;
    let instances = match a.instances.clone().or_else(|| ctx.cfg.instances.clone()) {
        Some(p) => Some((read_instances(&p)?, p)),
        None => None,
    };
    let sample_cap = a.sample_cap.or(ctx.cfg.stats.sample_cap).unwrap_or(1000);
    let seed = ctx.seed(a.seed);
    let out = compute_stats(&templates, &annotations, instances.as_ref().map(|(i, _)| i.as_slice()), sample_cap, seed);
    write_json(&a.out, &out)?;
    let mut inputs: Vec<&Path> = a.templates.iter().map(PathBuf::as_path).collect();
    if let Some((_, p)) = &instances {
        inputs.push(p);
    }
    write_manifest(&a.out, &ctx.manifest("stats", json!({ "sample_cap": sample_cap }), seed, &inputs)?)?;
    Ok(())
}

/// Files written by `pipeline`, relative to the output directory.
pub mod pipeline_files {
    pub const GUIDING: &str = "guiding.jsonl";
    pub const CANDIDATES: &str = "candidates.jsonl";
    pub const FILTER_REPORT: &str = "filter_report.json";
    pub const VALID: &str = "valid.jsonl";
    pub const ALL_TEMPLATES: &str = "all_templates.jsonl";
    pub const POOLS: &str = "pools.json";
    pub const DIST: &str = "dist.json";
    pub const DATASET: &str = "dataset.jsonl";
    pub const BUILD_REPORT: &str = "build_report.json";
    pub const STATS: &str = "stats.json";
}

fn cmd_pipeline(ctx: &Ctx, a: PipelineArgs) -> CliResult<()> {
    use pipeline_files as f;
    if ctx.config_path.is_none() {
        return Err(CliError::Usage("pipeline needs --config".into()));
    }
    let out_dir = require_path(a.out_dir.clone(), &ctx.cfg.out_dir, "out-dir")?;
    let templates_path = require_path(None, &ctx.cfg.templates, "templates")?;
    let instances_path = require_path(None, &ctx.cfg.instances, "instances")?;
    let llm = ctx.llm_settings(&a.llm)?;
    let seed = ctx.seed(a.seed);
    let exp = expansion_config_from(ctx, None, None, None, None, None, Some(seed))?;
    let filter = ctx.filter_config(&FilterFlags::default())?;
    let n_siblings = ctx.cfg.score.n_siblings.unwrap_or(DEFAULT_N_SIBLINGS);
    let eps_mode = epsilon_mode(ctx, None)?;
    let softmax_temp = ctx.cfg.dist.softmax_temp.unwrap_or(1.0);
    let build_cfg = BuildConfig { per_task_cap: ctx.cfg.build.cap.unwrap_or(1000), seed, epsilon_mode: eps_mode };
    let sample_cap = ctx.cfg.stats.sample_cap.unwrap_or(1000);
    let bootstrap_count = ctx.cfg.bootstrap.count.unwrap_or(10);
    let bootstrap_temp = ctx.cfg.bootstrap.temperature.unwrap_or(0.6);
    let (emb_name, emb) = embedder(ctx, None)?;

    let (raw, annotations) = read_templates(std::slice::from_ref(&templates_path))?;
    if let Some(t) = raw.iter().find(|t| t.origin != Origin::Raw) {
        return Err(CliError::Data(format!("template `{}` in the raw template file is not raw", t.template_id)));
    }
    let instances = read_instances(&instances_path)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
    let gateway = llm.gateway()?;

    let snapshot = json!({
        "out_dir": out_dir,
        "templates": templates_path,
        "instances": instances_path,
        "guiding": ctx.cfg.guiding,
        "bootstrap": { "count": bootstrap_count, "temperature": bootstrap_temp },
        "llm": llm,
        "expand": exp,
        "filter": filter,
        "score": { "embedder": emb_name, "n_siblings": n_siblings },
        "dist": { "epsilon": eps_mode, "softmax_temp": softmax_temp },
        "build": build_cfg,
        "stats": { "sample_cap": sample_cap },
    });
    let mut inputs: Vec<&Path> = vec![&templates_path, &instances_path];
    inputs.extend(llm.inputs());
    if let Some(g) = &ctx.cfg.guiding {
        inputs.push(g);
    }
    let manifest = ctx.manifest("pipeline", snapshot, seed, &inputs)?;
    let emit = |name: &str| -> CliResult<PathBuf> {
        let p = out_dir.join(name);
        write_manifest(&p, &manifest)?;
        Ok(p)
    };

    let guiding: Vec<GuidingInstruction> = match &ctx.cfg.guiding {
        Some(p) => {
            existing(p)?;
            read_guiding_file(p)?
        }
        None => bootstrap_guiding_instructions(
            &gateway,
            bootstrap_count,
            bootstrap_temp,
            PromptOptions { fix_typos: llm.fix_typos },
        )?,
    };
    write_jsonl(&emit(f::GUIDING)?, &guiding)?;

    let candidates_path = out_dir.join(f::CANDIDATES);
    let journal = Journal::open(&journal_path(&candidates_path))?;
    let outcome = Expander::new(&gateway, filter.clone()).with_journal(journal).expand(&raw, &guiding, &exp)?;
    write_jsonl(&emit(f::CANDIDATES)?, &outcome.candidates)?;
    write_json(&emit(f::FILTER_REPORT)?, &outcome.report)?;

    let valid: Vec<GenerationCandidate> = outcome.valid().cloned().collect();
    let generated = valid_templates(&valid)?;
    write_jsonl(&emit(f::VALID)?, &template_lines(&generated))?;
    let all: Vec<InstructionTemplate> = raw.iter().chain(&generated).cloned().collect();
    write_jsonl(&emit(f::ALL_TEMPLATES)?, &template_lines(&all))?;

    let pools = score_pools(&raw, &generated, emb.as_ref(), n_siblings, seed)?;
    write_json(&emit(f::POOLS)?, &pools)?;
    let dist = distributions(&pools, eps_mode, softmax_temp)?;
    write_json(&emit(f::DIST)?, &dist)?;

    let (records, report) = build_dataset(&instances, &dist, &all, &build_cfg)?;
    crate::dataset::write_jsonl(&records, &emit(f::DATASET)?)?;
    write_json(&emit(f::BUILD_REPORT)?, &report)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }

    let stats = compute_stats(&all, &annotations, Some(&instances), sample_cap, seed);
    write_json(&emit(f::STATS)?, &stats)?;
    eprintln!(
        "pipeline: {} guiding, {} candidates, {} valid, {} records -> {}",
        guiding.len(),
        outcome.candidates.len(),
        generated.len(),
        records.len(),
        out_dir.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(p) => {
            existing(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let jobs = cli.jobs.or(cfg.jobs).unwrap_or(DEFAULT_CONCURRENCY).max(1);
    let ctx = Ctx { cfg, config_path: cli.config.clone(), jobs };
    match cli.command {
        Command::Bootstrap(a) => cmd_bootstrap(&ctx, a),
        Command::Expand(a) => cmd_expand(&ctx, a),
        Command::Filter(a) => cmd_filter(&ctx, a),
        Command::Score(a) => cmd_score(&ctx, a),
        Command::Dist(a) => cmd_dist(&ctx, a),
        Command::Build(a) => cmd_build(&ctx, a),
        Command::Stats(a) => cmd_stats(&ctx, a),
        Command::Pipeline(a) => cmd_pipeline(&ctx, a),
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let json_errors = argv.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            if json_errors {
                let msg = e.to_string();
                eprintln!("{}", json!({ "kind": "usage", "message": msg.trim(), "exit_code": EXIT_USAGE }));
            } else {
                let _ = e.print();
            }
            return EXIT_USAGE;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if json_errors {
                eprintln!("{}", json!({ "kind": e.kind(), "message": e.message(), "exit_code": e.exit_code() }));
            } else {
                eprintln!("{e}");
            }
            e.exit_code()
        }
    }
}
