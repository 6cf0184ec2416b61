//! Client for an external OpenAI-compatible chat-completion and embedding
//! service. Identical requests are served from a content-addressed cache;
//! failed calls are retried with exponential backoff; every non-cached call
//! increments a budget counter.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

pub mod stub;

pub const ENV_API_KEY: &str = "LLM_API_KEY";
pub const ENV_BASE_URL: &str = "LLM_BASE_URL";

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("llm client not configured: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("service error {status}: {body}")]
    Service { status: u16, body: String },
    #[error("could not decode service response: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Annotation defaults: temperature 0 for label stability.
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest(
                "messages must be non-empty".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub cached: bool,
}

/// Anything that answers chat and embedding requests.
pub trait ChatApi: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
    fn embed(&self, text: &str) -> Result<Vec<f64>, LlmError>;
    /// Model name used for chat requests built by callers.
    fn chat_model(&self) -> &str;
}

#[derive(Debug, Clone)]
pub struct LlmConfig {
    pub base_url: String,
    pub api_key: String,
    pub chat_model: String,
    pub embedding_model: String,
    /// On-disk cache directory; `None` keeps the cache in memory only.
    pub cache_dir: Option<PathBuf>,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub backoff_factor: f64,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl LlmConfig {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            chat_model: "gpt-4o".into(),
            embedding_model: "text-embedding-3-small".into(),
            cache_dir: None,
            max_attempts: 5,
            backoff_base: Duration::from_secs(1),
            backoff_factor: 2.0,
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
        }
    }

    /// Reads `LLM_API_KEY` (required) and `LLM_BASE_URL` (defaults to the
    /// public OpenAI endpoint).
    pub fn from_env() -> Result<Self, LlmError> {
        let key = std::env::var(ENV_API_KEY).map_err(|_| {
            LlmError::Config(format!("environment variable {ENV_API_KEY} is not set"))
        })?;
        let base = std::env::var(ENV_BASE_URL).unwrap_or_else(|_| "https://api.openai.com".into());
        Ok(Self::new(base, key))
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().expect("semaphore poisoned") += 1;
        self.sem.cv.notify_one();
    }
}

pub struct LlmClient {
    config: LlmConfig,
    agent: ureq::Agent,
    memory: Mutex<HashMap<String, String>>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    in_flight: Semaphore,
    budget: AtomicU64,
    attempts: AtomicU64,
}

impl LlmClient {
    pub fn new(config: LlmConfig) -> Result<Self, LlmError> {
        if config.base_url.is_empty() {
            return Err(LlmError::Config("base URL is empty".into()));
        }
        if let Some(dir) = &config.cache_dir {
            fs::create_dir_all(dir)
                .map_err(|e| LlmError::Config(format!("cache dir {}: {e}", dir.display())))?;
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Ok(Self {
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            agent,
            memory: Mutex::new(HashMap::new()),
            key_locks: Mutex::new(HashMap::new()),
            budget: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
        })
    }

    pub fn from_env() -> Result<Self, LlmError> {
        Self::new(LlmConfig::from_env()?)
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    /// Number of requests that were not served from the cache.
    pub fn budget_used(&self) -> u64 {
        self.budget.load(Ordering::SeqCst)
    }

    /// Total HTTP attempts, including retries.
    pub fn http_attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn chat_cache_key(&self, request: &ChatRequest) -> String {
        digest(&json!({
            "kind": "chat",
            "base_url": self.config.base_url,
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }))
    }

    fn embed_cache_key(&self, text: &str) -> String {
        digest(&json!({
            "kind": "embedding",
            "base_url": self.config.base_url,
            "model": self.config.embedding_model,
            "input": text,
        }))
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.key_locks
            .lock()
            .expect("lock map poisoned")
            .entry(key.to_string())
            .or_default()
            .clone()
    }

    fn cache_get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.memory.lock().expect("cache poisoned").get(key) {
            return Some(v.clone());
        }
        let dir = self.config.cache_dir.as_ref()?;
        let text = fs::read_to_string(dir.join(format!("{key}.json"))).ok()?;
        self.memory
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), text.clone());
        Some(text)
    }

    fn cache_put(&self, key: &str, value: String) {
        if let Some(dir) = &self.config.cache_dir {
            let path = dir.join(format!("{key}.json"));
            let tmp = dir.join(format!("{key}.json.tmp"));
            if let Err(e) = fs::write(&tmp, &value).and_then(|_| fs::rename(&tmp, &path)) {
                warn!("could not persist cache entry {}: {e}", path.display());
            }
        }
        self.memory
            .lock()
            .expect("cache poisoned")
            .insert(key.to_string(), value);
    }

    fn post_with_retry(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, LlmError> {
        let url = format!("{}{path}", self.config.base_url);
        let max = self.config.max_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 1..=max {
            if attempt > 1 {
                let delay = self
                    .config
                    .backoff_base
                    .mul_f64(self.config.backoff_factor.powi(attempt as i32 - 2));
                debug!("retrying {url} in {delay:?} (attempt {attempt})");
                std::thread::sleep(delay);
            }
            self.attempts.fetch_add(1, Ordering::SeqCst);
            let _permit = self.in_flight.acquire();
            let result = self
                .agent
                .post(&url)
                .header("Authorization", &format!("Bearer {}", self.config.api_key))
                .send_json(body);
            let mut response = match result {
                Ok(r) => r,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status().as_u16();
            let text = response.body_mut().read_to_string().unwrap_or_default();
            if (200..300).contains(&status) {
                return serde_json::from_str(&text).map_err(|e| LlmError::Decode(e.to_string()));
            }
            if is_retryable(status) {
                last_error = format!("status {status}");
                continue;
            }
            return Err(LlmError::Service {
                status,
                body: text.chars().take(200).collect(),
            });
        }
        Err(LlmError::Transport {
            attempts: max,
            message: last_error,
        })
    }
}

fn is_retryable(status: u16) -> bool {
    matches!(status, 408 | 429 | 500 | 502 | 503 | 504)
}

fn digest(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

impl ChatApi for LlmClient {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let key = self.chat_cache_key(request);
        let lock = self.key_lock(&key);
        let _guard = lock.lock().expect("key lock poisoned");
        if let Some(text) = self.cache_get(&key) {
            let mut resp: ChatResponse =
                serde_json::from_str(&text).map_err(|e| LlmError::Decode(e.to_string()))?;
            resp.cached = true;
            return Ok(resp);
        }
        self.budget.fetch_add(1, Ordering::SeqCst);
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let value = self.post_with_retry("/v1/chat/completions", &body)?;
        let content = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| LlmError::Decode("missing choices[0].message.content".into()))?
            .to_string();
        let resp = ChatResponse {
            content,
            prompt_tokens: value["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: value["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            cached: false,
        };
        self.cache_put(&key, serde_json::to_string(&resp).expect("serializable"));
        Ok(resp)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, LlmError> {
        if text.is_empty() {
            return Err(LlmError::InvalidRequest(
                "embedding input must be non-empty".into(),
            ));
        }
        let key = self.embed_cache_key(text);
        let lock = self.key_lock(&key);
        let _guard = lock.lock().expect("key lock poisoned");
        if let Some(cached) = self.cache_get(&key) {
            return serde_json::from_str(&cached).map_err(|e| LlmError::Decode(e.to_string()));
        }
        self.budget.fetch_add(1, Ordering::SeqCst);
        let body = json!({ "model": self.config.embedding_model, "input": text });
        let value = self.post_with_retry("/v1/embeddings", &body)?;
        let vector: Vec<f64> = value["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| LlmError::Decode("missing data[0].embedding".into()))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| LlmError::Decode("non-numeric embedding".into()))
            })
            .collect::<Result<_, _>>()?;
        self.cache_put(&key, serde_json::to_string(&vector).expect("serializable"));
        Ok(vector)
    }

    fn chat_model(&self) -> &str {
        &self.config.chat_model
    }
}
