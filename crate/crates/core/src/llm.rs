//! Chat-completion backends, meta-prompt construction and reply parsing.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub const SYSTEM_PROMPT: &str = "You are a helpful assistant.";
pub const GENERATION_HEADER: &str =
    "Please follow the description of the given instruction to modify the input text behind the token [TEXT].";
pub const CONSTRAINT_SENTENCE: &str = "Keep the content within brackets (including '{}') unchanged.";
pub const DEFAULT_MAX_TOKENS: u32 = 256;
pub const DEFAULT_CONCURRENCY: usize = 4;

pub const ENV_LLM_URL: &str = "INSTREXP_LLM_URL";
pub const ENV_LLM_KEY: &str = "INSTREXP_LLM_KEY";
pub const ENV_LLM_MODEL: &str = "INSTREXP_LLM_MODEL";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("could not parse an enumerated reply: {0}")]
    ParseFailure(String),
}

impl LlmError {
    fn is_transient(&self) -> bool {
        matches!(self, Self::BackendUnavailable(_) | Self::RateLimited { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_id: String,
}

impl ChatRequest {
    pub fn new(user_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: SYSTEM_PROMPT.to_string(),
            user_prompt: user_prompt.into(),
            temperature: 0.6,
            max_tokens: DEFAULT_MAX_TOKENS,
            model_id: String::new(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.system_prompt.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty system prompt".into()));
        }
        if self.user_prompt.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty user prompt".into()));
        }
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidingSource {
    #[default]
    HandWritten,
    Bootstrapped,
}

/// A rewriting directive sent alongside each template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidingInstruction {
    pub guiding_id: String,
    pub text: String,
    #[serde(default)]
    pub source: GuidingSource,
}

impl GuidingInstruction {
    /// Builds a guiding instruction, folding the text onto one line.
    pub fn new(guiding_id: impl Into<String>, text: &str, source: GuidingSource) -> Option<Self> {
        let text = collapse_whitespace(text);
        (!text.is_empty()).then(|| Self { guiding_id: guiding_id.into(), text, source })
    }
}

pub(crate) fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Anything that can answer a single chat request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureMatch {
    pub substring: String,
    #[serde(default)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(rename = "match")]
    pub matcher: FixtureMatch,
    pub response: String,
}

/// Replays canned responses; the first entry whose substring occurs in the
/// user prompt (and whose temperature, when set, matches) wins.
#[derive(Debug, Default)]
pub struct MockBackend {
    entries: Vec<FixtureEntry>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(entries: Vec<FixtureEntry>) -> Self {
        Self { entries, calls: AtomicUsize::new(0) }
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, crate::io::JsonlError> {
        Ok(Self::new(crate::io::read_jsonl(path)?))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.entries
            .iter()
            .find(|e| {
                req.user_prompt.contains(&e.matcher.substring)
                    && e.matcher.temperature.is_none_or(|t| (t - req.temperature).abs() < 1e-9)
            })
            .map(|e| e.response.clone())
            .ok_or_else(|| {
                LlmError::BadResponse(format!(
                    "no fixture matches prompt at temperature {:.2}: {:?}",
                    req.temperature,
                    req.user_prompt.lines().last().unwrap_or_default()
                ))
            })
    }
}

/// Chat-completions over HTTP (OpenAI-style JSON).
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: Option<String>, model: impl Into<String>) -> Self {
        let base = base_url.trim_end_matches('/');
        let endpoint = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build();
        Self { endpoint, api_key, model: model.into(), agent }
    }

    /// Reads `INSTREXP_LLM_URL`, `INSTREXP_LLM_KEY` and `INSTREXP_LLM_MODEL`.
    pub fn from_env() -> Result<Self, LlmError> {
        let url = std::env::var(ENV_LLM_URL)
            .map_err(|_| LlmError::BackendUnavailable(format!("{ENV_LLM_URL} is not set")))?;
        let key = std::env::var(ENV_LLM_KEY).ok().filter(|k| !k.is_empty());
        let model = std::env::var(ENV_LLM_MODEL).unwrap_or_default();
        Ok(Self::new(&url, key, model))
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String, LlmError> {
        let model = if req.model_id.is_empty() { &self.model } else { &req.model_id };
        let body = json!({
            "model": model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let mut call = self.agent.post(&self.endpoint).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let value: serde_json::Value = match call.send_json(body) {
            Ok(resp) => resp.into_json().map_err(|e| LlmError::BadResponse(e.to_string()))?,
            Err(ureq::Error::Status(429, resp)) => {
                let retry_after = resp
                    .header("retry-after")
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .map(Duration::from_secs_f64);
                return Err(LlmError::RateLimited { retry_after });
            }
            Err(ureq::Error::Status(code, _)) if code >= 500 => {
                return Err(LlmError::BackendUnavailable(format!("HTTP {code}")))
            }
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                return Err(LlmError::BadResponse(format!("HTTP {code}: {detail}")));
            }
            Err(ureq::Error::Transport(t)) => return Err(LlmError::BackendUnavailable(t.to_string())),
        };
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))?;
        if content.trim().is_empty() {
            return Err(LlmError::BadResponse("empty completion".into()));
        }
        Ok(content.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay: Duration,
    pub max_delay: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_retries: 0, ..Self::default() }
    }

    /// No waiting between attempts; for tests and mock runs.
    pub fn immediate(max_retries: u32) -> Self {
        Self { max_retries, initial_delay: Duration::ZERO, max_delay: Duration::ZERO, multiplier: 1.0 }
    }

    pub fn delay_for(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.powi(attempt as i32);
        self.initial_delay.mul_f64(factor).min(self.max_delay)
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Backend wrapper adding validation, retries, a concurrency cap and a
/// minimum spacing between request starts.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    retry: RetryPolicy,
    slots: Semaphore,
    concurrency: usize,
    min_interval: Duration,
    last_start: Mutex<Option<Instant>>,
    model_id: String,
    max_tokens: u32,
}

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            slots: Semaphore { permits: Mutex::new(DEFAULT_CONCURRENCY), cv: Condvar::new() },
            concurrency: DEFAULT_CONCURRENCY,
            min_interval: Duration::ZERO,
            last_start: Mutex::new(None),
            model_id: String::new(),
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        let n = n.max(1);
        self.concurrency = n;
        self.slots = Semaphore { permits: Mutex::new(n), cv: Condvar::new() };
        self
    }

    pub fn with_min_interval(mut self, interval: Duration) -> Self {
        self.min_interval = interval;
        self
    }

    pub fn with_model(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn max_tokens(&self) -> u32 {
        self.max_tokens
    }

    fn pace(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let mut last = self.last_start.lock().unwrap();
        if let Some(prev) = *last {
            let ready = prev + self.min_interval;
            let now = Instant::now();
            if ready > now {
                std::thread::sleep(ready - now);
            }
        }
        *last = Some(Instant::now());
    }

    /// Sends one request, retrying transient failures with exponential backoff.
    pub fn chat_generate(&self, req: &ChatRequest) -> Result<String, LlmError> {
        req.validate()?;
        let _slot = self.slots.acquire();
        let mut attempt = 0;
        loop {
            self.pace();
            match self.backend.complete(req) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() && attempt < self.retry.max_retries => {
                    let delay = match &e {
                        LlmError::RateLimited { retry_after: Some(d) } => (*d).min(self.retry.max_delay),
                        _ => self.retry.delay_for(attempt),
                    };
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Wording switches for the meta-prompts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    /// Replace the original "cononical" with "canonical".
    pub fix_typos: bool,
}

pub fn bootstrap_prompt(count: usize, opts: PromptOptions) -> String {
    let word = if opts.fix_typos { "canonical" } else { "cononical" };
    format!(
        "Generate {count} instructions about how to rephrase short text. \
         Your response should be {word} and formatted as enumerations."
    )
}

/// Asks the LLM for `count` rewriting directives.
pub fn bootstrap_guiding_instructions(
    gateway: &Gateway,
    count: usize,
    temperature: f64,
    opts: PromptOptions,
) -> Result<Vec<GuidingInstruction>, LlmError> {
    if count == 0 {
        return Err(LlmError::InvalidRequest("count must be at least 1".into()));
    }
    let mut req = ChatRequest::new(bootstrap_prompt(count, opts)).with_temperature(temperature);
    req.model_id = gateway.model_id().to_string();
    req.max_tokens = gateway.max_tokens().max(DEFAULT_MAX_TOKENS * 4);
    let reply = gateway.chat_generate(&req)?;
    let items = guiding_from_reply(&reply, count);
    if items.is_empty() {
        return Err(LlmError::ParseFailure(reply));
    }
    Ok(items)
}

/// Turns a bootstrap reply into at most `count` guiding instructions.
pub fn guiding_from_reply(reply: &str, count: usize) -> Vec<GuidingInstruction> {
    parse_enumerated_response(reply)
        .into_iter()
        .take(count)
        .enumerate()
        .filter_map(|(i, text)| {
            GuidingInstruction::new(format!("boot-{:02}", i + 1), &text, GuidingSource::Bootstrapped)
        })
        .collect()
}

/// Builds the rewrite request for one (guiding instruction, masked template) pair.
pub fn build_generation_prompt(g: &GuidingInstruction, masked_text: &str, has_placeholders: bool) -> ChatRequest {
    let mut user = String::with_capacity(GENERATION_HEADER.len() + g.text.len() + masked_text.len() + 80);
    user.push_str(GENERATION_HEADER);
    user.push('\n');
    user.push_str(&g.text);
    if has_placeholders {
        user.push(' ');
        user.push_str(CONSTRAINT_SENTENCE);
    }
    user.push('\n');
    user.push_str("[TEXT]: ");
    user.push_str(masked_text);
    ChatRequest::new(user)
}

fn enumeration_marker(line: &str) -> Option<&str> {
    let trimmed = line.trim_start();
    let digits = trimmed.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &trimmed[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    if rest.is_empty() {
        return Some(rest);
    }
    rest.starts_with(char::is_whitespace).then_some(rest)
}

fn clean_item(s: &str) -> String {
    collapse_whitespace(&s.replace("**", ""))
}

/// Extracts items from a `1.` / `1)` style enumeration.
///
/// A blank line ends the current item, so trailing chatter after the list
/// is dropped. A reply without any enumeration is returned whole.
pub fn parse_enumerated_response(text: &str) -> Vec<String> {
    let mut items: Vec<String> = Vec::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        if let Some(body) = enumeration_marker(line) {
            if let Some(done) = current.take() {
                items.push(done);
            }
            current = Some(body.to_string());
        } else if line.trim().is_empty() {
            if let Some(done) = current.take() {
                items.push(done);
            }
        } else if let Some(cur) = current.as_mut() {
            cur.push(' ');
            cur.push_str(line.trim());
        }
    }
    if let Some(done) = current.take() {
        items.push(done);
    }
    let items: Vec<String> = items.iter().map(|s| clean_item(s)).filter(|s| !s.is_empty()).collect();
    if !items.is_empty() {
        return items;
    }
    let whole = text.trim();
    if whole.is_empty() {
        Vec::new()
    } else {
        vec![whole.to_string()]
    }
}

/// Reads hand-written guiding instructions from JSONL or plain text (one per line).
pub fn read_guiding_file(path: &Path) -> Result<Vec<GuidingInstruction>, crate::io::JsonlError> {
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl" || e == "json");
    if is_jsonl {
        return crate::io::read_jsonl(path);
    }
    let text = fs::read_to_string(path).map_err(|e| crate::io::JsonlError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .filter_map(|(i, l)| GuidingInstruction::new(format!("g{:02}", i + 1), l, GuidingSource::HandWritten))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const APPENDIX_REPLY: &str = "Sure! Here are 10 instructions on how to rephrase short text:

1. **Use synonyms**: Replace specific words or phrases with their synonyms to convey the same meaning for the input.

2. **Rearrange phrases for the input sentence**: Reorganize sentences or phrases to improve readability or flow without changing the overall meaning.

3. **Simplify language**: Use simpler vocabulary and sentence structures to make the text more accessible and easier to understand.

4. **Remove redundancies**: Eliminate unnecessary words or phrases that do not add to the meaning of the text.

5. **Use active voice**: Convert passive sentences to active ones to make the text more engaging and easier to read.

6. **Break up long sentences**: Divide long sentences into  shorter ones to improve readability and flow.

7. **Use bullet points or numbered lists**: Organize information using bullet points or numbered lists to make it easier to read and understand.

8. **Replace jargon with common terms**: Use plain language instead of technical jargon or industry-specific terms to make the text more accessible to a wider audience.

9. **Use inclusive language**: Avoid using language that stereotypes or excludes certain groups of people. Instead, use language that is respectful and inclusive of all individuals.

10. **Check for consistency**: Ensure that the text is consistent in terms of tone, style, and format throughout.

I hope these help! Let me know if you need anything else.";

    fn mock(response: &str) -> Gateway {
        Gateway::new(Box::new(MockBackend::new(vec![FixtureEntry {
            matcher: FixtureMatch { substring: String::new(), temperature: None },
            response: response.into(),
        }])))
        .with_retry(RetryPolicy::immediate(0))
    }

    #[test]
    fn parses_appendix_reply() {
        let items = parse_enumerated_response(APPENDIX_REPLY);
        assert_eq!(items.len(), 10);
        assert_eq!(
            items[0],
            "Use synonyms: Replace specific words or phrases with their synonyms to convey the same meaning for the input."
        );
        assert!(items[1].starts_with("Rearrange phrases for the input sentence: "));
        assert!(items[9].starts_with("Check for consistency: "));
        for item in &items {
            assert!(!item.starts_with(|c: char| c.is_ascii_digit()));
            assert_eq!(item.trim(), item);
        }
    }

    #[test]
    fn parses_paren_markers_and_continuations() {
        let items = parse_enumerated_response("1) first\n   continues here\n2) second");
        assert_eq!(items, ["first continues here", "second"]);
    }

    #[test]
    fn non_enumerated_reply_is_one_item() {
        assert_eq!(parse_enumerated_response("  Describe the image briefly.  "), ["Describe the image briefly."]);
        assert!(parse_enumerated_response("").is_empty());
        assert!(parse_enumerated_response("  \n ").is_empty());
    }

    #[test]
    fn numbers_without_marker_are_not_items() {
        assert_eq!(parse_enumerated_response("2024 was a year"), ["2024 was a year"]);
        assert_eq!(parse_enumerated_response("3.5 apples"), ["3.5 apples"]);
    }

    #[test]
    fn generation_prompt_layout() {
        let g = GuidingInstruction::new("g", "Use synonyms.", GuidingSource::HandWritten).unwrap();
        let req = build_generation_prompt(&g, "Is the object {A} in {B}? {C}", true);
        assert_eq!(req.system_prompt, "You are a helpful assistant.");
        assert_eq!(
            req.user_prompt,
            "Please follow the description of the given instruction to modify the input text behind the token [TEXT].\n\
             Use synonyms. Keep the content within brackets (including '{}') unchanged.\n\
             [TEXT]: Is the object {A} in {B}? {C}"
        );
        assert_eq!(req.user_prompt.matches(CONSTRAINT_SENTENCE).count(), 1);

        let plain = build_generation_prompt(&g, "What is the caption of the image?", false);
        assert!(!plain.user_prompt.contains(CONSTRAINT_SENTENCE));
        assert!(plain.user_prompt.ends_with("[TEXT]: What is the caption of the image?"));
        assert_eq!(plain, build_generation_prompt(&g, "What is the caption of the image?", false));
    }

    #[test]
    fn bootstrap_prompt_keeps_original_wording() {
        assert_eq!(
            bootstrap_prompt(10, PromptOptions::default()),
            "Generate 10 instructions about how to rephrase short text. Your response should be cononical and formatted as enumerations."
        );
        assert!(bootstrap_prompt(10, PromptOptions { fix_typos: true }).contains("canonical"));
    }

    #[test]
    fn bootstraps_from_appendix_reply() {
        let gw = mock(APPENDIX_REPLY);
        let items = bootstrap_guiding_instructions(&gw, 10, 0.6, PromptOptions::default()).unwrap();
        assert_eq!(items.len(), 10);
        assert!(items[0].text.starts_with("Use synonyms: Replace specific words"));
        assert!(items.iter().all(|g| g.source == GuidingSource::Bootstrapped));
        assert_eq!(items[9].guiding_id, "boot-10");

        let one = bootstrap_guiding_instructions(&mock("1. Paraphrase it."), 1, 0.6, PromptOptions::default())
            .unwrap();
        assert_eq!(one.len(), 1);
        let capped = bootstrap_guiding_instructions(&gw, 3, 0.6, PromptOptions::default()).unwrap();
        assert_eq!(capped.len(), 3);
    }

    #[test]
    fn bootstrap_rejects_zero_and_empty() {
        assert!(bootstrap_guiding_instructions(&mock("x"), 0, 0.6, PromptOptions::default()).is_err());
        assert!(matches!(
            bootstrap_guiding_instructions(&mock("   "), 2, 0.6, PromptOptions::default()),
            Err(LlmError::ParseFailure(_))
        ));
    }

    #[test]
    fn request_validation() {
        let gw = mock("ok");
        assert!(matches!(gw.chat_generate(&ChatRequest::new("")), Err(LlmError::InvalidRequest(_))));
        assert!(gw.chat_generate(&ChatRequest::new("hi").with_temperature(f64::NAN)).is_err());
        assert!(gw.chat_generate(&ChatRequest::new("hi").with_temperature(2.5)).is_err());
        assert_eq!(gw.chat_generate(&ChatRequest::new("hi")).unwrap(), "ok");
    }

    #[test]
    fn mock_matches_substring_then_temperature() {
        let backend = MockBackend::new(vec![
            FixtureEntry {
                matcher: FixtureMatch { substring: "cat".into(), temperature: Some(0.9) },
                response: "hot cat".into(),
            },
            FixtureEntry {
                matcher: FixtureMatch { substring: "cat".into(), temperature: None },
                response: "any cat".into(),
            },
        ]);
        assert_eq!(backend.complete(&ChatRequest::new("a cat").with_temperature(0.9)).unwrap(), "hot cat");
        assert_eq!(backend.complete(&ChatRequest::new("a cat").with_temperature(0.5)).unwrap(), "any cat");
        assert!(matches!(backend.complete(&ChatRequest::new("a dog")), Err(LlmError::BadResponse(_))));
        assert_eq!(backend.calls(), 3);
    }

    struct Flaky {
        failures: AtomicUsize,
        error: LlmError,
    }

    impl ChatBackend for Flaky {
        fn complete(&self, _: &ChatRequest) -> Result<String, LlmError> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(self.error.clone());
            }
            Ok("recovered".into())
        }
    }

    #[test]
    fn retries_transient_failures() {
        let flaky = |n, error| Flaky { failures: AtomicUsize::new(n), error };
        let gw = Gateway::new(Box::new(flaky(2, LlmError::BackendUnavailable("down".into()))))
            .with_retry(RetryPolicy::immediate(3));
        assert_eq!(gw.chat_generate(&ChatRequest::new("x")).unwrap(), "recovered");

        let gw = Gateway::new(Box::new(flaky(5, LlmError::BackendUnavailable("down".into()))))
            .with_retry(RetryPolicy::immediate(3));
        assert!(matches!(gw.chat_generate(&ChatRequest::new("x")), Err(LlmError::BackendUnavailable(_))));

        let gw = Gateway::new(Box::new(flaky(9, LlmError::RateLimited { retry_after: None })))
            .with_retry(RetryPolicy::immediate(1));
        assert!(matches!(gw.chat_generate(&ChatRequest::new("x")), Err(LlmError::RateLimited { .. })));

        let gw = Gateway::new(Box::new(flaky(1, LlmError::BadResponse("junk".into()))))
            .with_retry(RetryPolicy::immediate(3));
        assert!(matches!(gw.chat_generate(&ChatRequest::new("x")), Err(LlmError::BadResponse(_))));
    }

    #[test]
    fn backoff_is_bounded() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_for(0), Duration::from_millis(500));
        assert_eq!(p.delay_for(1), Duration::from_millis(1000));
        assert_eq!(p.delay_for(10), Duration::from_secs(8));
    }

    #[test]
    fn guiding_text_is_single_paragraph() {
        let g = GuidingInstruction::new("g", "line one\n  line two", GuidingSource::HandWritten).unwrap();
        assert_eq!(g.text, "line one line two");
        assert!(GuidingInstruction::new("g", " \n", GuidingSource::HandWritten).is_none());
    }
}
