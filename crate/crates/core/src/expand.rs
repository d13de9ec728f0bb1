//! Generate-then-filter expansion of instruction templates.
//!
//! Three regimes are supported: a single pass at one temperature, iterative
//! rounds where the valid rewrites of one round are rewritten again, and a
//! multi-temperature sweep over the raw templates.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{FilterConfig, FilterReport, FilterState};
use crate::llm::{build_generation_prompt, parse_enumerated_response, Gateway, GuidingInstruction, LlmError};
use crate::ppg::{mask_placeholders, restore_placeholders, PpgError};
use crate::template::{InstructionTemplate, Lineage, Origin};

#[derive(Debug, Error)]
pub enum ExpandError {
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Ppg(#[from] PpgError),
    #[error("journal {path}: {message}")]
    Journal { path: String, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    #[default]
    Pending,
    Valid,
    RejectedDuplicate,
    RejectedPlaceholder,
    RejectedLength,
    RejectedParse,
}

impl Verdict {
    pub fn is_terminal(self) -> bool {
        self != Verdict::Pending
    }
}

/// One rewrite returned by the LLM, with provenance and filter verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationCandidate {
    pub candidate_id: String,
    pub task_id: String,
    pub parent_template_id: String,
    pub root_template_id: String,
    /// Rendered text of the template that was rewritten.
    pub parent_text: String,
    pub guiding_id: String,
    pub temperature: f64,
    pub iteration: u32,
    pub raw_output: String,
    pub restored_text: String,
    pub verdict: Verdict,
}

impl GenerationCandidate {
    pub fn lineage(&self) -> Lineage {
        Lineage {
            parent_template_id: self.parent_template_id.clone(),
            root_template_id: self.root_template_id.clone(),
            guiding_id: self.guiding_id.clone(),
            temperature: self.temperature,
            iteration: self.iteration,
        }
    }

    /// The candidate as a generated template; its id is the candidate id.
    pub fn to_template(&self) -> Result<InstructionTemplate, crate::template::TemplateError> {
        InstructionTemplate::generated(&self.candidate_id, &self.task_id, &self.restored_text, self.lineage())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpansionMode {
    #[default]
    Single,
    #[serde(alias = "iterative")]
    Iter,
    #[serde(alias = "multi_temperature")]
    Mt,
}

impl std::str::FromStr for ExpansionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Self::Single),
            "iter" | "iterative" => Ok(Self::Iter),
            "mt" | "multi_temperature" => Ok(Self::Mt),
            other => Err(format!("unknown expansion mode `{other}` (single|iter|mt)")),
        }
    }
}

/// 0.50, 0.55, ..., 1.00
pub fn default_ladder() -> Vec<f64> {
    (0..=10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// Parses `start:end:step` into an inclusive ladder rounded to 1e-6.
pub fn parse_ladder(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad ladder `{spec}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [start, end, step] = parts[..] else {
        return Err(format!("ladder `{spec}` must look like start:end:step"));
    };
    if !(step > 0.0) || end < start {
        return Err(format!("ladder `{spec}` needs step > 0 and end >= start"));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((start + step * i as f64) * 1e6).round() / 1e6).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    pub mode: ExpansionMode,
    pub iterations: u32,
    pub temperature: f64,
    pub temperature_ladder: Vec<f64>,
    pub target_count: Option<usize>,
    pub seed: u64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            mode: ExpansionMode::Single,
            iterations: 2,
            temperature: 0.6,
            temperature_ladder: default_ladder(),
            target_count: None,
            seed: 0,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iterations == 0 {
            return Err("iterations must be at least 1".into());
        }
        if self.temperature_ladder.is_empty() && self.mode == ExpansionMode::Mt {
            return Err("temperature ladder is empty".into());
        }
        if self.temperature_ladder.windows(2).any(|w| w[1] <= w[0]) {
            return Err("temperature ladder must be strictly increasing".into());
        }
        if self.target_count == Some(0) {
            return Err("target count must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpansionOutcome {
    /// Every candidate with its terminal verdict, sorted by candidate_id.
    pub candidates: Vec<GenerationCandidate>,
    pub report: FilterReport,
    /// Distinct temperatures at which a generation pass ran.
    pub passes: usize,
    /// Chat requests issued or replayed from the journal.
    pub requests: usize,
    /// Rounds that ran (1 except in the iterative regime).
    pub rounds: u32,
}

impl ExpansionOutcome {
    pub fn valid(&self) -> impl Iterator<Item = &GenerationCandidate> {
        self.candidates.iter().filter(|c| c.verdict == Verdict::Valid)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JournalLine {
    request_id: String,
    response: String,
}

/// Append-only record of completed chat requests. A rerun replays
/// journaled responses instead of calling the backend again.
pub struct Journal {
    path: PathBuf,
    done: HashMap<String, String>,
    file: Mutex<File>,
}

impl Journal {
    pub fn open(path: &Path) -> Result<Self, ExpandError> {
        let err = |message: String| ExpandError::Journal { path: path.display().to_string(), message };
        let mut done = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| err(e.to_string()))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| err(e.to_string()))?;
                // A torn final line from an interrupted run is ignored.
                if let Ok(entry) = serde_json::from_str::<JournalLine>(&line) {
                    done.insert(entry.request_id, entry.response);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| err(e.to_string()))?;
        Ok(Self { path: path.to_path_buf(), done, file: Mutex::new(file) })
    }

    pub fn len(&self) -> usize {
        self.done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.done.is_empty()
    }

    fn get(&self, request_id: &str) -> Option<&str> {
        self.done.get(request_id).map(String::as_str)
    }

    fn record(&self, request_id: &str, response: &str) -> Result<(), ExpandError> {
        let line = serde_json::to_string(&JournalLine { request_id: request_id.into(), response: response.into() })
            .expect("journal line serializes");
        let mut f = self.file.lock().unwrap();
        writeln!(f, "{line}")
            .and_then(|_| f.flush())
            .map_err(|e| ExpandError::Journal { path: self.path.display().to_string(), message: e.to_string() })
    }
}

struct RoundInput {
    template: InstructionTemplate,
    root_template_id: String,
}

struct RequestSpec<'a> {
    request_id: String,
    input: &'a RoundInput,
    guiding: &'a GuidingInstruction,
    temperature: f64,
}

#[derive(Default)]
struct RoundResult {
    candidates: Vec<GenerationCandidate>,
    requests: usize,
    stopped: bool,
}

pub struct Expander<'a> {
    gateway: &'a Gateway,
    filter: FilterConfig,
    journal: Option<Journal>,
}

impl<'a> Expander<'a> {
    pub fn new(gateway: &'a Gateway, filter: FilterConfig) -> Self {
        Self { gateway, filter, journal: None }
    }

    pub fn with_journal(mut self, journal: Journal) -> Self {
        self.journal = Some(journal);
        self
    }

    fn check_inputs(&self, templates: &[InstructionTemplate], guiding: &[GuidingInstruction]) -> Result<(), ExpandError> {
        if guiding.is_empty() {
            return Err(ExpandError::Precondition("at least one guiding instruction is required".into()));
        }
        if let Some(t) = templates.iter().find(|t| t.origin != Origin::Raw) {
            return Err(ExpandError::Precondition(format!("template `{}` is not a raw template", t.template_id)));
        }
        Ok(())
    }

    fn respond(&self, spec: &RequestSpec<'_>, masked: &str) -> Result<String, ExpandError> {
        if let Some(hit) = self.journal.as_ref().and_then(|j| j.get(&spec.request_id)) {
            return Ok(hit.to_string());
        }
        let mut req = build_generation_prompt(spec.guiding, masked, spec.input.template.has_placeholders())
            .with_temperature(spec.temperature);
        req.model_id = self.gateway.model_id().to_string();
        req.max_tokens = self.gateway.max_tokens();
        let text = self.gateway.chat_generate(&req)?;
        if let Some(j) = &self.journal {
            j.record(&spec.request_id, &text)?;
        }
        Ok(text)
    }

    /// Issues every (input, guiding, temperature) request, filtering the
    /// replies one request at a time in request_id order.
    fn run_round(
        &self,
        inputs: &[RoundInput],
        guiding: &[GuidingInstruction],
        temperatures: &[f64],
        iteration: u32,
        state: &mut FilterState,
        mut budget: Option<&mut usize>,
    ) -> Result<RoundResult, ExpandError> {
        let mut masked_inputs = Vec::with_capacity(inputs.len());
        for input in inputs {
            masked_inputs.push(mask_placeholders(&input.template)?);
        }
        let mut specs = Vec::new();
        for (idx, input) in inputs.iter().enumerate() {
            for g in guiding {
                for &temperature in temperatures {
                    let request_id = format!("{}|{}@{:.2}", input.template.template_id, g.guiding_id, temperature);
                    specs.push((idx, RequestSpec { request_id, input, guiding: g, temperature }));
                }
            }
        }
        specs.sort_by(|a, b| a.1.request_id.cmp(&b.1.request_id));

        let mut result = RoundResult::default();
        for chunk in specs.chunks(self.gateway.concurrency().max(1)) {
            let replies: Vec<Result<String, ExpandError>> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(idx, spec)| {
                        let masked = &masked_inputs[*idx].0;
                        scope.spawn(move || self.respond(spec, masked))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
            });
            for ((idx, spec), reply) in chunk.iter().zip(replies) {
                let reply = reply?;
                result.requests += 1;
                let map = &masked_inputs[*idx].1;
                let mut items = parse_enumerated_response(&reply);
                if items.is_empty() {
                    items.push(String::new());
                }
                let mut accepted = 0;
                for (k, item) in items.into_iter().enumerate() {
                    let mut c = GenerationCandidate {
                        candidate_id: format!("{}#{k:03}", spec.request_id),
                        task_id: spec.input.template.task_id.clone(),
                        parent_template_id: spec.input.template.template_id.clone(),
                        root_template_id: spec.input.root_template_id.clone(),
                        parent_text: spec.input.template.render(),
                        guiding_id: spec.guiding.guiding_id.clone(),
                        temperature: spec.temperature,
                        iteration,
                        restored_text: restore_placeholders(&item, map),
                        raw_output: item,
                        verdict: Verdict::Pending,
                    };
                    if state.apply(&mut c) == Verdict::Valid {
                        accepted += 1;
                    }
                    result.candidates.push(c);
                }
                if let Some(left) = budget.as_deref_mut() {
                    *left = left.saturating_sub(accepted);
                    if *left == 0 {
                        result.stopped = true;
                        return Ok(result);
                    }
                }
            }
        }
        Ok(result)
    }

    fn raw_inputs(templates: &[InstructionTemplate]) -> Vec<RoundInput> {
        templates
            .iter()
            .map(|t| RoundInput { template: t.clone(), root_template_id: t.template_id.clone() })
            .collect()
    }

    fn finish(mut candidates: Vec<GenerationCandidate>, state: FilterState, passes: usize, requests: usize, rounds: u32) -> ExpansionOutcome {
        candidates.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
        ExpansionOutcome { candidates, report: state.into_report(), passes, requests, rounds }
    }

    /// One rewrite pass over the raw templates at `cfg.temperature`.
    pub fn expand_single(
        &self,
        templates: &[InstructionTemplate],
        guiding: &[GuidingInstruction],
        cfg: &ExpansionConfig,
    ) -> Result<ExpansionOutcome, ExpandError> {
        self.check_inputs(templates, guiding)?;
        let mut state = FilterState::new(self.filter.clone(), templates);
        let inputs = Self::raw_inputs(templates);
        let round = self.run_round(&inputs, guiding, &[cfg.temperature], 0, &mut state, None)?;
        let passes = usize::from(round.requests > 0);
        Ok(Self::finish(round.candidates, state, passes, round.requests, 1))
    }

    /// Rewrites the valid outputs of each round again, up to
    /// `cfg.iterations` rounds or until `cfg.target_count` valid rewrites exist.
    pub fn expand_iterative(
        &self,
        templates: &[InstructionTemplate],
        guiding: &[GuidingInstruction],
        cfg: &ExpansionConfig,
    ) -> Result<ExpansionOutcome, ExpandError> {
        self.check_inputs(templates, guiding)?;
        cfg.validate().map_err(ExpandError::Precondition)?;
        let mut state = FilterState::new(self.filter.clone(), templates);
        let mut inputs = Self::raw_inputs(templates);
        let mut all = Vec::new();
        let mut requests = 0;
        let mut rounds = 0;
        let mut budget = cfg.target_count;
        for iteration in 0..cfg.iterations {
            if inputs.is_empty() {
                break;
            }
            let round = self.run_round(&inputs, guiding, &[cfg.temperature], iteration, &mut state, budget.as_mut())?;
            rounds += 1;
            requests += round.requests;
            let mut next = Vec::new();
            for c in round.candidates.iter().filter(|c| c.verdict == Verdict::Valid) {
                let template = c
                    .to_template()
                    .map_err(|e| ExpandError::Precondition(format!("valid candidate failed to parse: {e}")))?;
                next.push(RoundInput { template, root_template_id: c.root_template_id.clone() });
            }
            next.sort_by(|a, b| a.template.template_id.cmp(&b.template.template_id));
            all.extend(round.candidates);
            inputs = next;
            if round.stopped {
                break;
            }
        }
        let passes = usize::from(requests > 0);
        Ok(Self::finish(all, state, passes, requests, rounds))
    }

    /// One pass per ladder temperature over the raw templates, deduplicated
    /// across all passes.
    pub fn expand_multi_temperature(
        &self,
        templates: &[InstructionTemplate],
        guiding: &[GuidingInstruction],
        cfg: &ExpansionConfig,
    ) -> Result<ExpansionOutcome, ExpandError> {
        self.check_inputs(templates, guiding)?;
        cfg.validate().map_err(ExpandError::Precondition)?;
        if cfg.temperature_ladder.is_empty() {
            return Err(ExpandError::Precondition("temperature ladder is empty".into()));
        }
        let mut state = FilterState::new(self.filter.clone(), templates);
        let inputs = Self::raw_inputs(templates);
        let round = self.run_round(&inputs, guiding, &cfg.temperature_ladder, 0, &mut state, None)?;
        let passes = if round.requests > 0 { cfg.temperature_ladder.len() } else { 0 };
        Ok(Self::finish(round.candidates, state, passes, round.requests, 1))
    }

    pub fn expand(
        &self,
        templates: &[InstructionTemplate],
        guiding: &[GuidingInstruction],
        cfg: &ExpansionConfig,
    ) -> Result<ExpansionOutcome, ExpandError> {
        match cfg.mode {
            ExpansionMode::Single => self.expand_single(templates, guiding, cfg),
            ExpansionMode::Iter => self.expand_iterative(templates, guiding, cfg),
            ExpansionMode::Mt => self.expand_multi_temperature(templates, guiding, cfg),
        }
    }
}
