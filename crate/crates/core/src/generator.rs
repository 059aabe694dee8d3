//! The multimodal model behind the pipeline, reduced to "prompt document in,
//! text out". Ships two deterministic mocks and a JSON-over-HTTP adapter.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::prompt::{
    compliant_reply, parse_class_list, PromptDocument, PromptPart, ANSWER_MARKER, CHOICES_MARKER,
    TEMPLATE_BEGIN, TEMPLATE_END,
};

pub const DEFAULT_API_KEY_ENV: &str = "GENERATOR_API_KEY";

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("credential environment variable {0} is not set")]
    CredentialMissing(String),
    #[error("cannot read image {path}: {source}")]
    UnreadableImage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("scripted generator has no replies left")]
    ScriptExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorReply {
    pub text: String,
    pub latency: Duration,
    pub attempt_count: u32,
}

/// Anything that turns a prompt document into reply text.
///
/// Implementations must tolerate concurrent calls from evaluation workers.
pub trait Generator: Send + Sync {
    fn generate(&self, doc: &PromptDocument) -> Result<GeneratorReply, GeneratorError>;

    /// Upper bound on useful concurrent calls.
    fn max_parallel(&self) -> usize {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// Replies with the most frequent demo answer found in the document.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoModalGenerator;

impl Generator for EchoModalGenerator {
    fn generate(&self, doc: &PromptDocument) -> Result<GeneratorReply, GeneratorError> {
        let start = Instant::now();
        let text = echo_modal(doc);
        Ok(GeneratorReply {
            text,
            latency: start.elapsed(),
            attempt_count: 1,
        })
    }
}

/// Modal demo answer, ties going to the answer that appears first in the
/// document. Without demos, falls back to the first listed class.
pub fn echo_modal(doc: &PromptDocument) -> String {
    let mut answers: Vec<&str> = Vec::new();
    let mut first_choices: Option<&str> = None;
    for text in doc.texts() {
        let mut in_template = false;
        for line in text.lines() {
            if line == TEMPLATE_BEGIN {
                in_template = true;
            } else if line == TEMPLATE_END {
                in_template = false;
            } else if in_template {
                continue;
            } else if let Some(answer) = line.strip_prefix(ANSWER_MARKER) {
                answers.push(answer.trim());
            } else if let Some(list) = line.strip_prefix(CHOICES_MARKER) {
                first_choices.get_or_insert(list);
            }
        }
    }

    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (pos, a) in answers.iter().enumerate() {
        counts.entry(a).or_insert((0, pos)).0 += 1;
    }
    let modal = counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(a, _)| a.to_string());
    let answer = modal.unwrap_or_else(|| {
        first_choices
            .and_then(parse_class_list)
            .and_then(|v| v.into_iter().next())
            .unwrap_or_default()
    });
    compliant_reply(&answer, 1.0)
}

/// Returns pre-recorded replies in order, then fails. Single consumer.
#[derive(Debug, Default)]
pub struct ScriptedGenerator {
    replies: Mutex<VecDeque<String>>,
}

impl ScriptedGenerator {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
        }
    }
}

impl Generator for ScriptedGenerator {
    fn generate(&self, _doc: &PromptDocument) -> Result<GeneratorReply, GeneratorError> {
        let text = self
            .replies
            .lock()
            .expect("scripted generator lock")
            .pop_front()
            .ok_or(GeneratorError::ScriptExhausted)?;
        Ok(GeneratorReply {
            text,
            latency: Duration::ZERO,
            attempt_count: 1,
        })
    }

    fn max_parallel(&self) -> usize {
        1
    }
}

/// Settings for [`HttpGenerator`]. The credential itself is only ever read
/// from the environment variable named by `api_key_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub max_parallel: usize,
    pub max_retries: u32,
    pub timeout_secs: f64,
    /// Base delay of the exponential backoff; retry `n` sleeps a uniformly
    /// random duration in `[0, base * 2^n)`.
    pub backoff_base_ms: u64,
    /// JSON pointer to the reply text in the response body.
    pub response_pointer: String,
    /// Directory that relative image references are resolved against.
    pub image_root: Option<PathBuf>,
    /// Passed through verbatim as `generation_config` when set.
    pub sampling: Option<Value>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            endpoint_url: String::new(),
            model_name: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            max_parallel: 4,
            max_retries: 5,
            timeout_secs: 120.0,
            backoff_base_ms: 1000,
            response_pointer: "/text".to_string(),
            image_root: None,
            sampling: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.max_parallel == 0 {
            return Err(GeneratorError::InvalidConfig(
                "max_parallel must be at least 1".into(),
            ));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(GeneratorError::InvalidConfig(
                "timeout_secs must be positive".into(),
            ));
        }
        if self.endpoint_url.is_empty() {
            return Err(GeneratorError::InvalidConfig(
                "endpoint_url is empty".into(),
            ));
        }
        Ok(())
    }
}

struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("semaphore lock");
        while *n == 0 {
            n = self.freed.wait(n).expect("semaphore lock");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore lock") += 1;
        self.0.freed.notify_one();
    }
}

/// Posts `{"model", "parts": [...], "generation_config"?}` to the endpoint
/// with a bearer credential and reads the reply text at `response_pointer`.
///
/// Text parts are `{"type": "text", "text"}`; images are
/// `{"type": "image", "mime_type", "data"}` with base64 data, in document order.
pub struct HttpGenerator {
    config: GeneratorConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(GeneratorError),
}

impl HttpGenerator {
    /// Fails with [`GeneratorError::CredentialMissing`] before any network use
    /// if the credential variable is unset or empty.
    pub fn new(config: GeneratorConfig) -> Result<Self, GeneratorError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GeneratorError::CredentialMissing(config.api_key_env.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| GeneratorError::InvalidConfig(e.to_string()))?;
        let in_flight = Semaphore::new(config.max_parallel);
        Ok(Self {
            config,
            api_key,
            client,
            in_flight,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn resolve(&self, image_ref: &str) -> PathBuf {
        let p = Path::new(image_ref);
        match &self.config.image_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// The JSON body sent for `doc`. Reads every referenced image.
    pub fn request_body(&self, doc: &PromptDocument) -> Result<Value, GeneratorError> {
        let mut parts = Vec::with_capacity(doc.parts.len());
        for part in &doc.parts {
            match part {
                PromptPart::Text(t) => parts.push(json!({"type": "text", "text": t})),
                PromptPart::ImageRef(r) => {
                    let path = self.resolve(r);
                    let bytes =
                        fs::read(&path).map_err(|source| GeneratorError::UnreadableImage {
                            path: path.clone(),
                            source,
                        })?;
                    parts.push(json!({
                        "type": "image",
                        "mime_type": mime_type(&path),
                        "data": BASE64.encode(bytes),
                    }));
                }
            }
        }
        let mut body = json!({"model": self.config.model_name, "parts": parts});
        if let Some(sampling) = &self.config.sampling {
            body["generation_config"] = sampling.clone();
        }
        Ok(body)
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let resp = match self
            .client
            .post(&self.config.endpoint_url)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
        {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        if status.as_u16() == 429 || status.as_u16() == 408 || status.is_server_error() {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Attempt::Fatal(GeneratorError::Protocol(format!("HTTP {status}: {text}")));
        }
        let value: Value = match resp.json() {
            Ok(v) => v,
            Err(e) if e.is_timeout() => return Attempt::Retry(e.to_string()),
            Err(e) => {
                return Attempt::Fatal(GeneratorError::Protocol(format!("bad response body: {e}")))
            }
        };
        match value
            .pointer(&self.config.response_pointer)
            .and_then(Value::as_str)
        {
            Some(text) => Attempt::Done(text.to_string()),
            None => Attempt::Fatal(GeneratorError::Protocol(format!(
                "no string at {} in response",
                self.config.response_pointer
            ))),
        }
    }

    fn backoff(&self, retry: u32) -> Duration {
        let cap = self
            .config
            .backoff_base_ms
            .saturating_mul(1u64 << retry.min(20));
        if cap == 0 {
            return Duration::ZERO;
        }
        Duration::from_millis(rand::thread_rng().gen_range(0..cap))
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, doc: &PromptDocument) -> Result<GeneratorReply, GeneratorError> {
        let body = self.request_body(doc)?;
        let _permit = self.in_flight.acquire();
        let start = Instant::now();
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff(attempt - 1));
            }
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    return Ok(GeneratorReply {
                        text,
                        latency: start.elapsed(),
                        attempt_count: attempt + 1,
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(why) => {
                    log::warn!("generator attempt {} failed: {why}", attempt + 1);
                    last = why;
                }
            }
        }
        Err(GeneratorError::RetriesExhausted {
            attempts: self.config.max_retries + 1,
            last,
        })
    }

    fn max_parallel(&self) -> usize {
        self.config.max_parallel
    }
}

fn mime_type(path: &Path) -> &'static str {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "bmp" => "image/bmp",
        "tif" | "tiff" => "image/tiff",
        _ => "application/octet-stream",
    }
}
