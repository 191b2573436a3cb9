//! Language-model gateway: prompt construction, completion backends, and
//! response parsing.
//!
//! Prompts are built from templates into [`PromptBundle`]s that carry a
//! content-derived script key. The scripted backend answers from a fixture
//! file keyed by those hashes, which is what makes whole pipeline runs
//! reproducible without a live model; the HTTP backend speaks a chat
//! completion endpoint with capped exponential backoff.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{Sentiment, Triple};
use crate::hashing;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("template {name}: {reason}")]
    TemplateInvalid { name: String, reason: String },
    #[error("script file {path}: {source}")]
    ScriptIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("script file {path} line {line}: {reason}")]
    ScriptParse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("script defines key {key} for kind {kind:?} more than once")]
    ScriptConflict { kind: PromptKind, key: String },
    #[error("no scripted response for kind {kind:?} key {key}")]
    UnscriptedPrompt { kind: PromptKind, key: String },
    #[error("authentication rejected by completion endpoint")]
    AuthFailed,
    #[error("completion request failed after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Http {
        status: Option<u16>,
        attempts: u32,
        message: String,
    },
    #[error("completion response malformed: {message}")]
    BadResponse { message: String },
    #[error("could not parse model reply: {reason}; raw reply: {raw}")]
    ParseResponse { reason: String, raw: String },
}

fn parse_err(reason: String, raw: &str) -> GatewayError {
    GatewayError::ParseResponse {
        reason,
        raw: raw.to_string(),
    }
}

/// The three prompt families the pipeline issues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    /// Condense a batch of reviews into one abstract.
    Abstract,
    /// List the aspects discussed in a set of abstracts.
    Aspect,
    /// Extract vocabulary-constrained triples from one review.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: &'static str,
    pub text: String,
}

/// Joins segment texts when rendering a bundle.
pub const SEGMENT_SEPARATOR: &str = "\n\n";

/// A fully rendered prompt plus the hash key scripted runs answer it by.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub kind: PromptKind,
    pub segments: Vec<Segment>,
    pub rendered: String,
    pub script_key: String,
}

fn bundle(kind: PromptKind, segments: Vec<Segment>, script_key: String) -> PromptBundle {
    let rendered = segments
        .iter()
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join(SEGMENT_SEPARATOR);
    PromptBundle {
        kind,
        segments,
        rendered,
        script_key,
    }
}

/// Script key for an abstract call over a packed batch of review texts.
pub fn abstract_script_key(batch: &[String]) -> String {
    let mut parts: Vec<&[u8]> = vec![b"abstract"];
    parts.extend(batch.iter().map(|t| t.as_bytes()));
    hashing::sha256_hex(&parts)
}

/// Script key for an aspect-listing call over a set of abstracts.
pub fn aspect_script_key(abstracts: &[String]) -> String {
    let mut parts: Vec<&[u8]> = vec![b"aspect"];
    parts.extend(abstracts.iter().map(|t| t.as_bytes()));
    hashing::sha256_hex(&parts)
}

/// Script key for a triple-extraction call. Keyed by the vocabulary list
/// plus the review text, deliberately excluding the history segment: a
/// scripted answer may depend on what vocabulary constrains the call but
/// must not depend on the caller's history, so one script line serves the
/// same (vocabulary, review) pair at any point of a run. Corpora fed to
/// scripted runs must therefore have distinct review texts; the synthetic
/// generator guarantees that.
pub fn dynamic_script_key(vocab_aspects: &[String], review: &str) -> String {
    let mut parts: Vec<&[u8]> = vec![b"dynamic"];
    parts.extend(vocab_aspects.iter().map(|a| a.as_bytes()));
    parts.push(review.as_bytes());
    hashing::sha256_hex(&parts)
}

/// Prompt template set. `Default` embeds the files shipped with this crate;
/// `from_dir` loads overrides from disk.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub abstract_instruction: String,
    pub aspect_instruction: String,
    pub dynamic_global: String,
    pub dynamic_personal: String,
    pub dynamic_personal_empty: String,
    pub dynamic_extract: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            abstract_instruction: include_str!("../templates/abstract.txt").trim_end().into(),
            aspect_instruction: include_str!("../templates/aspect.txt").trim_end().into(),
            dynamic_global: include_str!("../templates/dynamic_global.txt").trim_end().into(),
            dynamic_personal: include_str!("../templates/dynamic_personal.txt")
                .trim_end()
                .into(),
            dynamic_personal_empty: include_str!("../templates/dynamic_personal_empty.txt")
                .trim_end()
                .into(),
            dynamic_extract: include_str!("../templates/dynamic_extract.txt")
                .trim_end()
                .into(),
        }
    }
}

impl PromptTemplates {
    pub fn from_dir(dir: &Path) -> Result<Self, GatewayError> {
        let read = |name: &str| -> Result<String, GatewayError> {
            let path = dir.join(name);
            std::fs::read_to_string(&path)
                .map(|s| s.trim_end().to_string())
                .map_err(|err| GatewayError::TemplateInvalid {
                    name: name.to_string(),
                    reason: err.to_string(),
                })
        };
        let templates = Self {
            abstract_instruction: read("abstract.txt")?,
            aspect_instruction: read("aspect.txt")?,
            dynamic_global: read("dynamic_global.txt")?,
            dynamic_personal: read("dynamic_personal.txt")?,
            dynamic_personal_empty: read("dynamic_personal_empty.txt")?,
            dynamic_extract: read("dynamic_extract.txt")?,
        };
        templates.validate()?;
        Ok(templates)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let checks = [
            ("dynamic_global.txt", &self.dynamic_global, "{aspects}"),
            ("dynamic_personal.txt", &self.dynamic_personal, "{aspects}"),
            ("dynamic_extract.txt", &self.dynamic_extract, "{review}"),
        ];
        for (name, text, token) in checks {
            if !text.contains(token) {
                return Err(GatewayError::TemplateInvalid {
                    name: name.to_string(),
                    reason: format!("missing required placeholder {token}"),
                });
            }
        }
        Ok(())
    }
}

/// Complaint about one review during batching, indexed into the input list.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWarning {
    pub review_index: usize,
    pub message: String,
}

/// Greedily packs reviews, in order, into batches whose whitespace token
/// totals stay within `budget`. A single review over the budget is
/// truncated to the first `budget` tokens (which collapses its internal
/// whitespace) and warned about rather than dropped.
pub fn pack_review_batches(
    reviews: &[String],
    budget: usize,
) -> Result<(Vec<Vec<String>>, Vec<BatchWarning>), GatewayError> {
    if reviews.is_empty() {
        return Err(GatewayError::EmptyInput("reviews to pack"));
    }
    if budget == 0 {
        return Err(GatewayError::InvalidRequest(
            "token budget must be at least 1".into(),
        ));
    }
    let mut batches: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut used = 0usize;
    let mut warnings = Vec::new();
    for (index, review) in reviews.iter().enumerate() {
        let tokens: Vec<&str> = review.split_whitespace().collect();
        let (text, cost) = if tokens.len() > budget {
            warnings.push(BatchWarning {
                review_index: index,
                message: format!(
                    "review truncated from {} to {budget} tokens",
                    tokens.len()
                ),
            });
            (tokens[..budget].join(" "), budget)
        } else {
            (review.clone(), tokens.len())
        };
        if !current.is_empty() && used + cost > budget {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(text);
        used += cost;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok((batches, warnings))
}

/// Renders one abstract prompt per packed batch.
pub fn render_abstract_prompts(
    templates: &PromptTemplates,
    reviews: &[String],
    budget: usize,
) -> Result<(Vec<PromptBundle>, Vec<BatchWarning>), GatewayError> {
    let (batches, warnings) = pack_review_batches(reviews, budget)?;
    let bundles = batches
        .iter()
        .map(|batch| {
            let key = abstract_script_key(batch);
            bundle(
                PromptKind::Abstract,
                vec![
                    Segment {
                        label: "instruction",
                        text: templates.abstract_instruction.clone(),
                    },
                    Segment {
                        label: "reviews",
                        text: batch.join(SEGMENT_SEPARATOR),
                    },
                ],
                key,
            )
        })
        .collect();
    Ok((bundles, warnings))
}

/// Renders the aspect-listing prompt over the abstracts of one partition.
pub fn render_aspect_prompt(
    templates: &PromptTemplates,
    abstracts: &[String],
) -> Result<PromptBundle, GatewayError> {
    if abstracts.is_empty() {
        return Err(GatewayError::EmptyInput("abstracts"));
    }
    let key = aspect_script_key(abstracts);
    Ok(bundle(
        PromptKind::Aspect,
        vec![
            Segment {
                label: "instruction",
                text: templates.aspect_instruction.clone(),
            },
            Segment {
                label: "abstracts",
                text: abstracts.join(SEGMENT_SEPARATOR),
            },
        ],
        key,
    ))
}

/// Renders the extraction prompt for one review. Segments are always
/// `[global, personal, extract]`: the vocabulary constraint, the prior
/// aspects of this user and item (listed in vocabulary order, or a fixed
/// no-history sentence), and the review with output instructions.
pub fn render_dynamic_prompt(
    templates: &PromptTemplates,
    vocab_aspects: &[String],
    history: &BTreeSet<String>,
    review: &str,
) -> Result<PromptBundle, GatewayError> {
    if vocab_aspects.is_empty() {
        return Err(GatewayError::EmptyInput("vocabulary"));
    }
    if review.trim().is_empty() {
        return Err(GatewayError::EmptyInput("review"));
    }
    let global = templates
        .dynamic_global
        .replace("{aspects}", &vocab_aspects.join(", "));
    let prior: Vec<&str> = vocab_aspects
        .iter()
        .filter(|a| history.contains(*a))
        .map(String::as_str)
        .collect();
    let personal = if prior.is_empty() {
        templates.dynamic_personal_empty.clone()
    } else {
        templates
            .dynamic_personal
            .replace("{aspects}", &prior.join(", "))
    };
    let extract = templates.dynamic_extract.replace("{review}", review);
    Ok(bundle(
        PromptKind::Dynamic,
        vec![
            Segment {
                label: "global",
                text: global,
            },
            Segment {
                label: "personal",
                text: personal,
            },
            Segment {
                label: "extract",
                text: extract,
            },
        ],
        dynamic_script_key(vocab_aspects, review),
    ))
}

/// One completion call.
#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub bundle: PromptBundle,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_tokens must be at least 1".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        if self.model_id.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty model_id".into()));
        }
        Ok(())
    }
}

pub trait CompletionBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

/// Validates and executes a completion, logging prompt hash, latency, and
/// approximate token counts. Latency reaches the log only, never artifacts.
pub fn complete(
    backend: &dyn CompletionBackend,
    request: &CompletionRequest,
) -> Result<String, GatewayError> {
    request.validate()?;
    let started = Instant::now();
    let result = backend.run(request);
    let latency_ms = started.elapsed().as_millis();
    let prompt_tokens = request.bundle.rendered.split_whitespace().count();
    match &result {
        Ok(response) => log::debug!(
            "completion ok backend={} kind={:?} key={} model={} latency_ms={latency_ms} prompt_tokens={prompt_tokens} response_tokens={}",
            backend.name(),
            request.bundle.kind,
            request.bundle.script_key,
            request.model_id,
            response.split_whitespace().count(),
        ),
        Err(err) => log::warn!(
            "completion failed backend={} kind={:?} key={} model={} latency_ms={latency_ms} error={err}",
            backend.name(),
            request.bundle.kind,
            request.bundle.script_key,
            request.model_id,
        ),
    }
    result
}

/// Scripted response entry as stored on disk, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub kind: PromptKind,
    pub key: String,
    pub response: String,
}

/// Replays canned responses keyed by `(kind, script_key)`. Every prompt a
/// run issues must be present; a miss is an error, not a silent skip.
pub struct ScriptedBackend {
    responses: HashMap<(PromptKind, String), String>,
}

impl ScriptedBackend {
    pub fn from_entries(entries: Vec<ScriptEntry>) -> Result<Self, GatewayError> {
        let mut responses = HashMap::with_capacity(entries.len());
        for entry in entries {
            let slot = (entry.kind, entry.key);
            if responses.contains_key(&slot) {
                return Err(GatewayError::ScriptConflict {
                    kind: slot.0,
                    key: slot.1,
                });
            }
            responses.insert(slot, entry.response);
        }
        Ok(Self { responses })
    }

    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let content = std::fs::read_to_string(path).map_err(|source| GatewayError::ScriptIo {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::new();
        for (idx, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(line).map_err(|err| GatewayError::ScriptParse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    reason: err.to_string(),
                })?;
            entries.push(entry);
        }
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn name(&self) -> &'static str {
        "scripted"
    }

    fn run(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let slot = (request.bundle.kind, request.bundle.script_key.clone());
        self.responses
            .get(&slot)
            .cloned()
            .ok_or(GatewayError::UnscriptedPrompt {
                kind: slot.0,
                key: slot.1,
            })
    }
}

/// Writes script entries as JSONL.
pub fn write_script_file(path: &Path, entries: &[ScriptEntry]) -> Result<(), GatewayError> {
    let mut out = String::new();
    for entry in entries {
        out.push_str(&serde_json::to_string(entry).expect("entry serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| GatewayError::ScriptIo {
        path: path.to_path_buf(),
        source,
    })
}

/// Backoff schedule for transient HTTP failures: base doubles per attempt,
/// capped. No jitter, so retry timing never perturbs artifact content.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 250,
            max_delay_ms: 4_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay_ms(&self, attempt: u32) -> u64 {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        self.base_delay_ms
            .saturating_mul(factor)
            .min(self.max_delay_ms)
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

enum Attempt {
    Done(String),
    Transient { status: Option<u16>, message: String },
    Fatal(GatewayError),
}

/// Chat completion endpoint client. Retries rate limits, server errors,
/// and transport failures per [`RetryPolicy`]; authentication failures and
/// other client errors fail immediately.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(
        endpoint: &str,
        api_key: Option<String>,
        retry: RetryPolicy,
    ) -> Result<Self, GatewayError> {
        if endpoint.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty endpoint".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|err| GatewayError::Http {
                status: None,
                attempts: 0,
                message: err.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            api_key,
            retry,
            client,
        })
    }

    fn try_once(&self, request: &CompletionRequest) -> Attempt {
        let body = ChatRequest {
            model: &request.model_id,
            messages: vec![ChatMessage {
                role: "user",
                content: &request.bundle.rendered,
            }],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let mut http = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let response = match http.send() {
            Ok(r) => r,
            Err(err) => {
                return Attempt::Transient {
                    status: None,
                    message: err.to_string(),
                }
            }
        };
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Attempt::Fatal(GatewayError::AuthFailed);
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Transient {
                status: Some(status.as_u16()),
                message: format!("status {status}"),
            };
        }
        if !status.is_success() {
            return Attempt::Fatal(GatewayError::Http {
                status: Some(status.as_u16()),
                attempts: 1,
                message: format!("status {status}"),
            });
        }
        let parsed: Result<ChatResponse, _> = response.json();
        match parsed {
            Ok(chat) => match chat.choices.into_iter().next() {
                Some(choice) => Attempt::Done(choice.message.content),
                None => Attempt::Fatal(GatewayError::BadResponse {
                    message: "no choices in response".into(),
                }),
            },
            Err(err) => Attempt::Fatal(GatewayError::BadResponse {
                message: err.to_string(),
            }),
        }
    }
}

impl CompletionBackend for HttpBackend {
    fn name(&self) -> &'static str {
        "http"
    }

    fn run(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut attempt = 0u32;
        loop {
            match self.try_once(request) {
                Attempt::Done(content) => return Ok(content),
                Attempt::Fatal(err) => return Err(err),
                Attempt::Transient { status, message } => {
                    if attempt >= self.retry.max_retries {
                        return Err(GatewayError::Http {
                            status,
                            attempts: attempt + 1,
                            message,
                        });
                    }
                    let delay = self.retry.delay_ms(attempt);
                    log::warn!(
                        "transient completion failure (attempt {}): {message}; retrying in {delay}ms",
                        attempt + 1
                    );
                    std::thread::sleep(std::time::Duration::from_millis(delay));
                    attempt += 1;
                }
            }
        }
    }
}

/// Canonical aspect form: trimmed, lowercased, inner whitespace collapsed.
pub fn normalize_aspect(raw: &str) -> String {
    raw.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn strip_code_fence(text: &str) -> &str {
    let trimmed = text.trim();
    if let Some(rest) = trimmed.strip_prefix("```") {
        if let Some(nl) = rest.find('\n') {
            let body = &rest[nl + 1..];
            if let Some(stripped) = body.trim_end().strip_suffix("```") {
                return stripped.trim();
            }
        }
    }
    trimmed
}

/// Parses an aspect-listing reply: a JSON array of strings, possibly
/// fenced. Aspects are normalized; empties are dropped; duplicates keep
/// their first occurrence.
pub fn parse_aspect_list(raw: &str) -> Result<Vec<String>, GatewayError> {
    let body = strip_code_fence(raw);
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|err| parse_err(format!("not valid JSON: {err}"), raw))?;
    let array = value
        .as_array()
        .ok_or_else(|| parse_err("expected a JSON array".into(), raw))?;
    let mut seen = HashSet::new();
    let mut aspects = Vec::new();
    for (index, element) in array.iter().enumerate() {
        let text = element
            .as_str()
            .ok_or_else(|| parse_err(format!("element {index} is not a string"), raw))?;
        let aspect = normalize_aspect(text);
        if aspect.is_empty() {
            continue;
        }
        if seen.insert(aspect.clone()) {
            aspects.push(aspect);
        }
    }
    Ok(aspects)
}

/// Parses an extraction reply: a JSON array of triple objects, possibly
/// fenced. Aspects are normalized, opinions trimmed but otherwise verbatim,
/// sentiments matched case-insensitively. Errors name the offending element.
pub fn parse_triples(raw: &str) -> Result<Vec<Triple>, GatewayError> {
    let body = strip_code_fence(raw);
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|err| parse_err(format!("not valid JSON: {err}"), raw))?;
    let array = value
        .as_array()
        .ok_or_else(|| parse_err("expected a JSON array".into(), raw))?;
    let mut triples = Vec::with_capacity(array.len());
    for (index, element) in array.iter().enumerate() {
        let object = element
            .as_object()
            .ok_or_else(|| parse_err(format!("element {index} is not an object"), raw))?;
        let field = |name: &str| -> Result<&str, GatewayError> {
            object.get(name).and_then(|v| v.as_str()).ok_or_else(|| {
                parse_err(format!("element {index} missing string field \"{name}\""), raw)
            })
        };
        let aspect = normalize_aspect(field("aspect")?);
        if aspect.is_empty() {
            return Err(parse_err(format!("element {index} has an empty aspect"), raw));
        }
        let opinion = field("opinion")?.trim().to_string();
        if opinion.is_empty() {
            return Err(parse_err(format!("element {index} has an empty opinion"), raw));
        }
        let sentiment_raw = field("sentiment")?;
        let sentiment = Sentiment::parse(sentiment_raw).ok_or_else(|| {
            parse_err(
                format!("element {index} has unknown sentiment \"{sentiment_raw}\""),
                raw,
            )
        })?;
        triples.push(Triple {
            aspect,
            opinion,
            sentiment,
        });
    }
    Ok(triples)
}

/// Serializes triples exactly as [`parse_triples`] reads them back.
pub fn serialize_triples(triples: &[Triple]) -> String {
    serde_json::to_string(triples).expect("triples serialize")
}
