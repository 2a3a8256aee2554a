//! Chat-completion backends: a live OpenAI-compatible HTTP client and a
//! deterministic scripted implementation for tests, behind one trait.
//!
//! Requests carry a `tag` ("role#round") that keys scripted responses and
//! lets one script drive a full episode deterministically.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Agent role + round, e.g. `planner#1`; the scripting/caching key.
    pub tag: String,
}

impl ChatRequest {
    pub fn new(
        system_prompt: impl Into<String>,
        user_prompt: impl Into<String>,
        temperature: f64,
        max_output_tokens: u32,
        tag: impl Into<String>,
    ) -> Result<Self> {
        let system_prompt = system_prompt.into();
        let user_prompt = user_prompt.into();
        if system_prompt.trim().is_empty() || user_prompt.trim().is_empty() {
            return Err(Error::Backend("chat prompts must be non-empty".into()));
        }
        if max_output_tokens == 0 {
            return Err(Error::Backend("max_output_tokens must be >= 1".into()));
        }
        if temperature < 0.0 {
            return Err(Error::Backend("temperature must be >= 0".into()));
        }
        Ok(ChatRequest {
            system_prompt,
            user_prompt,
            temperature,
            max_output_tokens,
            tag: tag.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Usage>,
}

/// Uniform chat-completion interface; see [`HttpBackend`] and [`ScriptedBackend`].
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        (**self).complete(request)
    }
}

// --- scripted backend ---

/// Canned responses keyed by request tag, consumed in order.
///
/// Serializes as a bare `{tag: [responses...]}` map; that is also the script
/// file format.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Script {
    entries: BTreeMap<String, VecDeque<String>>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tag: impl Into<String>, response: impl Into<String>) {
        self.entries
            .entry(tag.into())
            .or_default()
            .push_back(response.into());
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("script file: {e}")))
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json_str(&text)
    }

    fn pop(&mut self, tag: &str) -> Option<String> {
        self.entries.get_mut(tag).and_then(|q| q.pop_front())
    }
}

/// Deterministic backend that replays a [`Script`].
///
/// Lookup tries the exact tag first; a tag of the form `scope/role#round`
/// falls back to `role#round`, so a bare script can drive scoped batch runs.
pub struct ScriptedBackend {
    script: Mutex<Script>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        ScriptedBackend {
            script: Mutex::new(script),
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let mut script = self.script.lock().expect("script lock poisoned");
        let text = script.pop(&request.tag).or_else(|| {
            request
                .tag
                .rfind('/')
                .and_then(|pos| script.pop(&request.tag[pos + 1..]))
        });
        match text {
            Some(text) => Ok(ChatResponse { text, usage: None }),
            None => Err(Error::ScriptExhausted(request.tag.clone())),
        }
    }
}

/// Wrapper that prefixes request tags with `scope/`, isolating one episode's
/// script entries from another's.
pub struct ScopedBackend<'a> {
    inner: &'a dyn ChatBackend,
    scope: String,
}

impl<'a> ScopedBackend<'a> {
    pub fn new(inner: &'a dyn ChatBackend, scope: impl Into<String>) -> Self {
        ScopedBackend {
            inner,
            scope: scope.into(),
        }
    }
}

impl ChatBackend for ScopedBackend<'_> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let mut scoped = request.clone();
        scoped.tag = format!("{}/{}", self.scope, request.tag);
        self.inner.complete(&scoped)
    }
}

/// Response cache keyed by a hash of the request content (tag excluded, so
/// repeated identical calls hit the cache across rounds).
pub struct CachingBackend<B> {
    inner: B,
    cache: Mutex<HashMap<u64, String>>,
}

impl<B: ChatBackend> CachingBackend<B> {
    pub fn new(inner: B) -> Self {
        CachingBackend {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn key(request: &ChatRequest) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        request.system_prompt.hash(&mut hasher);
        request.user_prompt.hash(&mut hasher);
        request.temperature.to_bits().hash(&mut hasher);
        request.max_output_tokens.hash(&mut hasher);
        hasher.finish()
    }
}

impl<B: ChatBackend> ChatBackend for CachingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let key = Self::key(request);
        if let Some(text) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(ChatResponse {
                text: text.clone(),
                usage: None,
            });
        }
        let response = self.inner.complete(request)?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, response.text.clone());
        Ok(response)
    }
}

// --- live backend ---

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Endpoint root; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Total attempts for transient failures (>= 1).
    pub retries: u32,
    /// Initial backoff, doubled per retry.
    pub backoff: Duration,
    /// Minimum spacing between request starts; zero disables rate limiting.
    pub min_request_interval: Duration,
    /// Global cap on concurrent in-flight requests.
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            api_key: None,
            retries: 3,
            backoff: Duration::from_millis(500),
            min_request_interval: Duration::ZERO,
            max_in_flight: 4,
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionReply {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ReplyUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ReplyUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Counting gate bounding concurrent in-flight requests.
struct InFlightGate {
    permits: Mutex<usize>,
    available: Condvar,
}

impl InFlightGate {
    fn new(limit: usize) -> Self {
        InFlightGate {
            permits: Mutex::new(limit.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightPermit<'_> {
        let mut permits = self.permits.lock().expect("gate lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("gate wait");
        }
        *permits -= 1;
        InFlightPermit { gate: self }
    }
}

struct InFlightPermit<'a> {
    gate: &'a InFlightGate,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.gate.permits.lock().expect("gate lock") += 1;
        self.gate.available.notify_one();
    }
}

/// Live OpenAI-compatible chat-completions client.
///
/// Retries network errors, HTTP 5xx and 429 with exponential backoff; any
/// other 4xx fails immediately.
pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
    next_slot: Mutex<Instant>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Backend(format!("http client: {e}")))?;
        Ok(HttpBackend {
            gate: InFlightGate::new(config.max_in_flight),
            next_slot: Mutex::new(Instant::now()),
            config,
            client,
        })
    }

    fn wait_for_slot(&self) {
        let interval = self.config.min_request_interval;
        if interval.is_zero() {
            return;
        }
        let wait_until = {
            let mut next = self.next_slot.lock().expect("rate lock");
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + interval;
            start
        };
        let now = Instant::now();
        if wait_until > now {
            std::thread::sleep(wait_until - now);
        }
    }

    fn post_once(&self, request: &ChatRequest) -> std::result::Result<ChatResponse, (bool, Error)> {
        let body = CompletionBody {
            model: &self.config.model,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: &request.system_prompt,
                },
                ChatMessage {
                    role: "user",
                    content: &request.user_prompt,
                },
            ],
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| (true, Error::Backend(format!("request to {url} failed: {e}"))))?;
        let status = response.status();
        if !status.is_success() {
            let transient = status.is_server_error() || status.as_u16() == 429;
            let body = response.text().unwrap_or_default();
            return Err((
                transient,
                Error::Backend(format!("{url} returned {status}: {body}")),
            ));
        }
        let reply: CompletionReply = response
            .json()
            .map_err(|e| (false, Error::Backend(format!("malformed completion reply: {e}"))))?;
        let text = reply
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .unwrap_or_default();
        if text.is_empty() {
            return Err((false, Error::Backend("empty response text".into())));
        }
        Ok(ChatResponse {
            text,
            usage: reply.usage.map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
        })
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let _permit = self.gate.acquire();
        let attempts = self.config.retries.max(1);
        let mut backoff = self.config.backoff;
        let mut last_error = None;
        for attempt in 0..attempts {
            self.wait_for_slot();
            match self.post_once(request) {
                Ok(response) => return Ok(response),
                Err((transient, error)) => {
                    if !transient {
                        return Err(error);
                    }
                    last_error = Some(error);
                    if attempt + 1 < attempts {
                        std::thread::sleep(backoff);
                        backoff = backoff.saturating_mul(2);
                    }
                }
            }
        }
        Err(last_error.unwrap_or_else(|| Error::Backend("no attempts made".into())))
    }
}

// --- response parsing ---

/// Locate the first balanced JSON object in `text`, parse it and return
/// `required_field`'s value. Surrounding prose is tolerated.
pub fn extract_json_object(text: &str, required_field: &str) -> Result<Value> {
    for (idx, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[idx..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => {
                return map.get(required_field).cloned().ok_or_else(|| {
                    Error::Parse(format!("JSON object has no field '{required_field}'"))
                });
            }
            _ => continue,
        }
    }
    Err(Error::Parse(format!(
        "no JSON object found in response: {}",
        text.chars().take(120).collect::<String>()
    )))
}

pub const JSON_REPAIR_NOTE: &str = "Return only the JSON object.";

/// Call the backend and parse the reply with `parse`; on parse failure
/// re-issue the request with `note` appended, up to `max_attempts` total.
///
/// Backend errors propagate immediately: the repair loop only covers
/// malformed output.
pub fn call_with_repair_by<T>(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    max_attempts: u32,
    note: &str,
    parse: impl Fn(&str) -> Result<T>,
) -> Result<T> {
    if max_attempts == 0 {
        return Err(Error::Backend("max_attempts must be >= 1".into()));
    }
    let mut last_error = None;
    for attempt in 0..max_attempts {
        let attempt_request = if attempt == 0 {
            request.clone()
        } else {
            let mut repaired = request.clone();
            repaired.user_prompt = format!("{}\n\n{note}", request.user_prompt);
            repaired
        };
        let response = backend.complete(&attempt_request)?;
        if response.text.trim().is_empty() {
            last_error = Some(Error::Parse("empty response text".into()));
            continue;
        }
        match parse(&response.text) {
            Ok(value) => return Ok(value),
            Err(e) => last_error = Some(e),
        }
    }
    Err(Error::Parse(format!(
        "malformed output after {max_attempts} attempt(s): {}",
        last_error.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// Field-extraction form of [`call_with_repair_by`].
pub fn call_with_repair(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    required_field: &str,
    max_attempts: u32,
) -> Result<Value> {
    call_with_repair_by(backend, request, max_attempts, JSON_REPAIR_NOTE, |text| {
        extract_json_object(text, required_field)
    })
}
