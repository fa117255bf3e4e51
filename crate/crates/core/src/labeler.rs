//! Zero-shot concept labeling through an OpenAI-compatible chat endpoint.
//!
//! Each concept's member words (unique, most frequent first) are rendered
//! into a fixed prompt. Results are cached on disk keyed by the SHA-256 of
//! the prompt, so an unchanged concept is never sent twice and a new
//! clustering invalidates old labels automatically.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::EncodedConcept;
use crate::config::LabelerConfig;

pub const API_KEY_ENV: &str = "LCA_API_KEY";
pub const SYSTEM_PREAMBLE: &str = "Assistant is a large language model trained by OpenAI.";
pub const INSTRUCTION: &str =
    "Instructions:\nGive a short and concise label that best describes the following list of words:";

const EXCERPT_LEN: usize = 200;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("no API credential: set the {API_KEY_ENV} environment variable")]
    MissingCredential,
    #[error("credential rejected (HTTP {status}): {excerpt}")]
    Auth { status: u16, excerpt: String },
    #[error("HTTP {status}: {excerpt}")]
    Http { status: u16, excerpt: String },
    #[error("malformed response: {reason}; body: {excerpt}")]
    Malformed { reason: String, excerpt: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<LabelError> },
    #[error("concept has no words to label")]
    NoWords,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn excerpt(body: &str) -> String {
    let mut s: String = body.chars().take(EXCERPT_LEN).collect();
    if body.chars().count() > EXCERPT_LEN {
        s.push('…');
    }
    s
}

/// Serializes the word list as `["w1", "w2", ...]` with JSON string escaping.
fn word_list(words: &[String]) -> String {
    let items: Vec<String> = words
        .iter()
        .map(|w| serde_json::to_string(w).expect("strings serialize"))
        .collect();
    format!("[{}]", items.join(", "))
}

/// The full four-line labeling prompt.
pub fn render_prompt(words: &[String]) -> String {
    format!("{SYSTEM_PREAMBLE}\n{INSTRUCTION}\n{}", word_list(words))
}

/// The user turn: everything after the system preamble.
pub fn render_user_message(words: &[String]) -> String {
    format!("{INSTRUCTION}\n{}", word_list(words))
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptId {
    pub layer: u32,
    pub cluster_id: usize,
}

impl std::fmt::Display for ConceptId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}c{}", self.layer, self.cluster_id)
    }
}

/// Unique surfaces by descending frequency, ties by first appearance.
pub fn ranked_words(concept: &EncodedConcept) -> Vec<(String, usize)> {
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (i, m) in concept.members.iter().enumerate() {
        first_seen.entry(m.surface.as_str()).or_insert(i);
        *counts.entry(m.surface.as_str()).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(first_seen[a.0].cmp(&first_seen[b.0])));
    ranked.into_iter().map(|(w, c)| (w.to_string(), c)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRequest {
    pub concept_id: ConceptId,
    pub words: Vec<String>,
    pub prompt: String,
    /// Unique surfaces before truncation.
    pub unique_words: usize,
}

impl LabelRequest {
    pub fn new(concept_id: ConceptId, words: Vec<String>) -> Result<Self, LabelError> {
        if words.is_empty() {
            return Err(LabelError::NoWords);
        }
        let prompt = render_prompt(&words);
        Ok(Self {
            concept_id,
            unique_words: words.len(),
            words,
            prompt,
        })
    }

    pub fn from_concept(concept: &EncodedConcept, max_words: usize) -> Result<Self, LabelError> {
        let ranked = ranked_words(concept);
        let unique = ranked.len();
        let words: Vec<String> = ranked.into_iter().take(max_words.max(1)).map(|(w, _)| w).collect();
        if unique > words.len() {
            log::info!(
                "concept L{}c{}: sending {} of {unique} unique words",
                concept.layer,
                concept.cluster_id,
                words.len()
            );
        }
        let mut req = Self::new(
            ConceptId {
                layer: concept.layer,
                cluster_id: concept.cluster_id,
            },
            words,
        )?;
        req.unique_words = unique;
        Ok(req)
    }

    pub fn hash(&self) -> String {
        prompt_hash(&self.prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub concept_id: ConceptId,
    pub label: String,
    pub model_name: String,
    pub prompt_hash: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body for `POST <base_url>/chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
}

impl ChatRequest {
    pub fn for_words(model: &str, words: &[String], temperature: f64, top_p: f64) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: SYSTEM_PREAMBLE.into(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: render_user_message(words),
                },
            ],
            temperature,
            top_p,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpReply {
    pub status: u16,
    pub retry_after: Option<Duration>,
    pub body: String,
}

/// Parses a `Retry-After` value given in seconds.
pub fn parse_retry_after(v: &str) -> Option<Duration> {
    v.trim()
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(Duration::from_secs_f64)
}

/// Sends one chat completion request. Network failures are `Err`; any HTTP
/// status is an `Ok` reply.
pub trait ChatTransport: Send + Sync {
    fn post(&self, request: &ChatRequest) -> Result<HttpReply, String>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: String,
}

impl HttpTransport {
    pub fn new(base_url: &str, api_key: &str, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        Self {
            agent: config.into(),
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key: api_key.to_string(),
        }
    }

    /// Reads the credential from `LCA_API_KEY`.
    pub fn from_env(config: &LabelerConfig) -> Result<Self, LabelError> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or(LabelError::MissingCredential)?;
        Ok(Self::new(&config.base_url, &key, Duration::from_secs(config.timeout_secs)))
    }
}

impl ChatTransport for HttpTransport {
    fn post(&self, request: &ChatRequest) -> Result<HttpReply, String> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(request)
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(parse_retry_after);
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply {
            status,
            retry_after,
            body,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, `attempt` counting from 1.
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

fn parse_label(body: &str) -> Result<String, LabelError> {
    let malformed = |reason: &str| LabelError::Malformed {
        reason: reason.to_string(),
        excerpt: excerpt(body),
    };
    let parsed: CompletionBody = serde_json::from_str(body).map_err(|e| malformed(&e.to_string()))?;
    let content = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| malformed("no message content"))?;
    content
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map(str::to_string)
        .ok_or_else(|| malformed("empty label"))
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct Labeler {
    transport: Arc<dyn ChatTransport>,
    model: String,
    temperature: f64,
    top_p: f64,
    policy: RetryPolicy,
    sleeper: Sleeper,
    calls: AtomicUsize,
}

impl Labeler {
    pub fn new(transport: Arc<dyn ChatTransport>, config: &LabelerConfig) -> Self {
        Self {
            transport,
            model: config.model.clone(),
            temperature: config.temperature,
            top_p: config.top_p,
            policy: RetryPolicy {
                max_attempts: config.max_attempts.max(1),
                base_delay: Duration::from_millis(config.backoff_base_ms),
                factor: config.backoff_factor,
            },
            sleeper: Arc::new(std::thread::sleep),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Requests sent so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Labels one concept, retrying rate limits, server errors and network
    /// failures with exponential backoff.
    pub fn label_concept(&self, request: &LabelRequest) -> Result<LabelResult, LabelError> {
        let body = ChatRequest::for_words(&self.model, &request.words, self.temperature, self.top_p);
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.calls.fetch_add(1, Ordering::SeqCst);
            let (err, wait) = match self.transport.post(&body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let label = parse_label(&reply.body)?;
                    return Ok(LabelResult {
                        concept_id: request.concept_id,
                        label,
                        model_name: self.model.clone(),
                        prompt_hash: request.hash(),
                        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                    });
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(LabelError::Auth {
                        status: reply.status,
                        excerpt: excerpt(&reply.body),
                    })
                }
                Ok(reply) if reply.status == 429 => {
                    let wait = reply.retry_after.unwrap_or_else(|| self.policy.backoff(attempt));
                    (
                        LabelError::Http {
                            status: 429,
                            excerpt: excerpt(&reply.body),
                        },
                        wait,
                    )
                }
                Ok(reply) if reply.status == 408 || reply.status >= 500 => (
                    LabelError::Http {
                        status: reply.status,
                        excerpt: excerpt(&reply.body),
                    },
                    self.policy.backoff(attempt),
                ),
                Ok(reply) => {
                    return Err(LabelError::Http {
                        status: reply.status,
                        excerpt: excerpt(&reply.body),
                    })
                }
                Err(e) => (LabelError::Network(e), self.policy.backoff(attempt)),
            };
            if attempt >= self.policy.max_attempts {
                return Err(LabelError::Exhausted {
                    attempts: attempt,
                    last: Box::new(err),
                });
            }
            log::warn!("{}: attempt {attempt} failed ({err}), retrying in {wait:?}", request.concept_id);
            (self.sleeper)(wait);
        }
    }

    /// Labels every request whose prompt hash is not cached.
    ///
    /// Up to `max_in_flight` requests run concurrently; results are appended
    /// to the cache by this thread as they arrive, so an interrupted run
    /// resumes where it stopped. Failures are collected, not fatal.
    pub fn label_all(&self, requests: &[LabelRequest], cache: &mut LabelCache, max_in_flight: usize) -> Result<LabelRunSummary, LabelError> {
        let mut summary = LabelRunSummary::default();
        let calls_before = self.network_calls();
        let mut pending: VecDeque<&LabelRequest> = VecDeque::new();
        for r in requests {
            if let Some(hit) = cache.get(&r.hash()) {
                let mut hit = hit.clone();
                hit.concept_id = r.concept_id;
                summary.cache_hits += 1;
                summary.results.insert(r.concept_id, hit);
            } else {
                pending.push_back(r);
            }
        }
        let workers = max_in_flight.max(1).min(pending.len());
        let queue = Mutex::new(pending);
        let (tx, rx) = mpsc::channel();
        let mut write_error = None;
        std::thread::scope(|s| {
            for _ in 0..workers {
                let tx = tx.clone();
                let queue = &queue;
                s.spawn(move || loop {
                    let next = queue.lock().unwrap().pop_front();
                    let Some(req) = next else { break };
                    let outcome = self.label_concept(req);
                    if tx.send((req.concept_id, outcome)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (id, outcome) in rx {
                match outcome {
                    Ok(result) => {
                        if write_error.is_none() {
                            if let Err(e) = cache.append(&result) {
                                write_error = Some(e);
                                // Stop handing out work; in-flight requests still drain.
                                queue.lock().unwrap().clear();
                            }
                        }
                        summary.results.insert(id, result);
                    }
                    Err(e) => {
                        log::error!("{id}: {e}");
                        summary.failures.push((id, e.to_string()));
                    }
                }
            }
        });
        if let Some(e) = write_error {
            return Err(e);
        }
        summary.failures.sort();
        summary.network_calls = self.network_calls() - calls_before;
        Ok(summary)
    }
}

#[derive(Debug, Default)]
pub struct LabelRunSummary {
    pub results: BTreeMap<ConceptId, LabelResult>,
    pub failures: Vec<(ConceptId, String)>,
    pub cache_hits: usize,
    pub network_calls: usize,
}

/// Append-only JSON-lines cache of [`LabelResult`]s keyed by prompt hash.
pub struct LabelCache {
    path: PathBuf,
    entries: HashMap<String, LabelResult>,
    /// The file ends mid-line; the next append starts a fresh line.
    torn_tail: bool,
}

impl LabelCache {
    /// Loads the cache, skipping lines that do not parse (such as a line cut
    /// short by an interrupted write).
    pub fn open(path: &Path) -> Result<Self, LabelError> {
        let io = |source| LabelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut entries = HashMap::new();
        let mut torn_tail = false;
        if path.exists() {
            let bytes = fs::read(path).map_err(io)?;
            torn_tail = bytes.last().is_some_and(|&b| b != b'\n');
            for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
                let line = line.map_err(|source| LabelError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<LabelResult>(&line) {
                    Ok(r) => {
                        entries.insert(r.prompt_hash.clone(), r);
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), i + 1),
                }
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
            torn_tail,
        })
    }

    pub fn get(&self, prompt_hash: &str) -> Option<&LabelResult> {
        self.entries.get(prompt_hash)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn append(&mut self, result: &LabelResult) -> Result<(), LabelError> {
        let io = |source| LabelError::Io {
            path: self.path.clone(),
            source,
        };
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io)?;
        let line = serde_json::to_string(result).expect("LabelResult serializes");
        if self.torn_tail {
            writeln!(file).map_err(io)?;
            self.torn_tail = false;
        }
        writeln!(file, "{line}").map_err(io)?;
        file.flush().map_err(io)?;
        self.entries.insert(result.prompt_hash.clone(), result.clone());
        Ok(())
    }
}
