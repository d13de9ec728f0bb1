//! Rule-based post-filters for generated templates.
//!
//! Stages run in a fixed order and the first failing stage decides the
//! verdict: parse check, exact-match dedup, placeholder match, length cap.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::expand::{GenerationCandidate, Verdict};
use crate::llm::collapse_whitespace;
use crate::ppg::{check_placeholder_match, MatchMode};
use crate::template::{parse_segments, InstructionTemplate};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupScope {
    #[default]
    PerTask,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub match_mode: MatchMode,
    pub length_filter_enabled: bool,
    pub length_ratio_cap: f64,
    pub absolute_word_cap: usize,
    pub dedup_scope: DedupScope,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            match_mode: MatchMode::Unordered,
            length_filter_enabled: true,
            length_ratio_cap: 3.0,
            absolute_word_cap: 60,
            dedup_scope: DedupScope::PerTask,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.length_ratio_cap > 1.0) {
            return Err(format!("length ratio cap must exceed 1, got {}", self.length_ratio_cap));
        }
        if self.absolute_word_cap == 0 {
            return Err("absolute word cap must be positive".into());
        }
        Ok(())
    }
}

/// Trim and collapse whitespace runs; comparison stays case-sensitive.
pub fn normalize_text(s: &str) -> String {
    collapse_whitespace(s)
}

/// Whitespace tokens. A placeholder contains no spaces, so it counts once.
pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// True when a rewrite of `original_words` words is too long to keep.
pub fn exceeds_length(candidate_words: usize, original_words: usize, cfg: &FilterConfig) -> bool {
    let w_c = candidate_words as f64;
    let w_o = original_words as f64;
    w_c > (cfg.length_ratio_cap * w_o).max(w_o + 10.0) || candidate_words > cfg.absolute_word_cap
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub valid: usize,
    pub dup: usize,
    pub placeholder: usize,
    pub length: usize,
    pub parse: usize,
}

impl StageCounts {
    fn record(&mut self, v: Verdict) {
        match v {
            Verdict::Valid => self.valid += 1,
            Verdict::RejectedDuplicate => self.dup += 1,
            Verdict::RejectedPlaceholder => self.placeholder += 1,
            Verdict::RejectedLength => self.length += 1,
            Verdict::RejectedParse => self.parse += 1,
            Verdict::Pending => {}
        }
    }

    pub fn total(&self) -> usize {
        self.valid + self.dup + self.placeholder + self.length + self.parse
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub tasks: BTreeMap<String, StageCounts>,
    pub total: StageCounts,
}

impl FilterReport {
    pub fn record(&mut self, task_id: &str, v: Verdict) {
        self.tasks.entry(task_id.to_string()).or_default().record(v);
        self.total.record(v);
    }

    pub fn merge(&mut self, other: &FilterReport) {
        for (task, c) in &other.tasks {
            let e = self.tasks.entry(task.clone()).or_default();
            e.valid += c.valid;
            e.dup += c.dup;
            e.placeholder += c.placeholder;
            e.length += c.length;
            e.parse += c.parse;
        }
        let t = &mut self.total;
        t.valid += other.total.valid;
        t.dup += other.total.dup;
        t.placeholder += other.total.placeholder;
        t.length += other.total.length;
        t.parse += other.total.parse;
    }
}

/// Rejects candidates whose placeholders do not match the template they rewrote.
pub fn placeholder_filter(candidate: &GenerationCandidate, original: &InstructionTemplate, cfg: &FilterConfig) -> Option<Verdict> {
    if !original.has_placeholders() {
        return None;
    }
    match check_placeholder_match(original, &candidate.restored_text, cfg.match_mode) {
        Ok(true) => None,
        Ok(false) => Some(Verdict::RejectedPlaceholder),
        Err(_) => Some(Verdict::RejectedParse),
    }
}

pub fn length_filter(candidate: &GenerationCandidate, original: &InstructionTemplate, cfg: &FilterConfig) -> Option<Verdict> {
    if !cfg.length_filter_enabled {
        return None;
    }
    let w_c = word_count(&candidate.restored_text);
    let w_o = word_count(&original.render());
    exceeds_length(w_c, w_o, cfg).then_some(Verdict::RejectedLength)
}

/// Normalized texts already taken, keyed by task when the scope is per task.
#[derive(Debug, Clone)]
struct SeenTexts {
    scope: DedupScope,
    seen: HashSet<(String, String)>,
}

impl SeenTexts {
    fn key(&self, task_id: &str, text: &str) -> (String, String) {
        let task = match self.scope {
            DedupScope::PerTask => task_id.to_string(),
            DedupScope::Global => String::new(),
        };
        (task, normalize_text(text))
    }

    fn contains(&self, task_id: &str, text: &str) -> bool {
        self.seen.contains(&self.key(task_id, text))
    }

    fn insert(&mut self, task_id: &str, text: &str) {
        let k = self.key(task_id, text);
        self.seen.insert(k);
    }
}

/// Marks duplicates in candidate_id order. Returns one entry per input
/// candidate (same order as given); `None` means not a duplicate.
pub fn dedup(
    candidates: &[GenerationCandidate],
    existing_texts: &[(String, String)],
    cfg: &FilterConfig,
) -> Vec<Option<Verdict>> {
    let mut seen = SeenTexts { scope: cfg.dedup_scope, seen: HashSet::new() };
    for (task, text) in existing_texts {
        seen.insert(task, text);
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[a].candidate_id.cmp(&candidates[b].candidate_id));
    let mut out = vec![None; candidates.len()];
    for i in order {
        let c = &candidates[i];
        if seen.contains(&c.task_id, &c.restored_text) {
            out[i] = Some(Verdict::RejectedDuplicate);
        } else {
            seen.insert(&c.task_id, &c.restored_text);
        }
    }
    out
}

/// Incremental filter pipeline. Texts enter the dedup set only once they
/// are accepted as valid (or are seeded as existing templates).
#[derive(Debug, Clone)]
pub struct FilterState {
    cfg: FilterConfig,
    seen: SeenTexts,
    report: FilterReport,
}

impl FilterState {
    pub fn new(cfg: FilterConfig, raw_templates: &[InstructionTemplate]) -> Self {
        let mut seen = SeenTexts { scope: cfg.dedup_scope, seen: HashSet::new() };
        for t in raw_templates {
            seen.insert(&t.task_id, &t.render());
        }
        Self { cfg, seen, report: FilterReport::default() }
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn report(&self) -> &FilterReport {
        &self.report
    }

    pub fn into_report(self) -> FilterReport {
        self.report
    }

    fn judge(&self, c: &GenerationCandidate) -> Verdict {
        if c.restored_text.trim().is_empty() || parse_segments(&c.restored_text).is_err() {
            return Verdict::RejectedParse;
        }
        let original = match InstructionTemplate::new(&c.parent_template_id, &c.task_id, &c.parent_text) {
            Ok(t) => t,
            Err(_) => return Verdict::RejectedParse,
        };
        if self.seen.contains(&c.task_id, &c.restored_text) {
            return Verdict::RejectedDuplicate;
        }
        placeholder_filter(c, &original, &self.cfg)
            .or_else(|| length_filter(c, &original, &self.cfg))
            .unwrap_or(Verdict::Valid)
    }

    /// Assigns a terminal verdict to `c` and returns it.
    pub fn apply(&mut self, c: &mut GenerationCandidate) -> Verdict {
        let verdict = self.judge(c);
        if verdict == Verdict::Valid {
            self.seen.insert(&c.task_id, &c.restored_text);
        }
        c.verdict = verdict;
        self.report.record(&c.task_id, verdict);
        verdict
    }
}

/// Re-judges every candidate from scratch, in candidate_id order.
///
/// `candidates` is sorted in place and every element gets a terminal
/// verdict; the valid ones are returned alongside the report.
pub fn run_pipeline(
    candidates: &mut [GenerationCandidate],
    raw_templates: &[InstructionTemplate],
    cfg: &FilterConfig,
) -> (Vec<GenerationCandidate>, FilterReport) {
    candidates.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
    let mut state = FilterState::new(cfg.clone(), raw_templates);
    let mut valid = Vec::new();
    for c in candidates.iter_mut() {
        c.verdict = Verdict::Pending;
        if state.apply(c) == Verdict::Valid {
            valid.push(c.clone());
        }
    }
    (valid, state.into_report())
}
