use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, GenerationRequest};

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

/// Retries cover transport failures and HTTP 429 only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, initial_backoff: Duration::from_secs(1), multiplier: 2.0 }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (attempts count from 1).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.powi(attempt.saturating_sub(1) as i32);
        self.initial_backoff.mul_f64(factor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub audit_log: Option<PathBuf>,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            max_in_flight: 8,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            audit_log: None,
        }
    }
}

struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct AuditLine<'a> {
    request: &'a Value,
    attempt: u32,
    status: Option<u16>,
    response: Option<&'a str>,
    error: Option<String>,
}

/// Chat-completions client: POSTs `{model, messages, temperature,
/// max_tokens}` and reads `choices[0].message.content`.
pub struct HttpBackend {
    config: HttpConfig,
    client: Client,
    api_key: Option<String>,
    in_flight: InFlight,
    audit: Option<Mutex<BufWriter<File>>>,
}

enum Attempt {
    Done(String),
    Retry(BackendError),
    Fail(BackendError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: HttpConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        if config.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be positive".into()));
        }
        if config.retry.max_attempts == 0 {
            return Err(BackendError::Config("retry policy needs at least one attempt".into()));
        }
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        let audit = match &config.audit_log {
            Some(path) => {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| BackendError::Config(format!("audit log {}: {e}", path.display())))?;
                Some(Mutex::new(BufWriter::new(file)))
            }
            None => None,
        };
        Ok(Self {
            in_flight: InFlight {
                limit: config.max_in_flight,
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
            config,
            client,
            api_key,
            audit,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn body(&self, request: &GenerationRequest) -> Value {
        json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    fn audit(&self, line: AuditLine<'_>) {
        if let Some(audit) = &self.audit {
            let mut w = audit.lock().unwrap_or_else(|e| e.into_inner());
            if let Ok(text) = serde_json::to_string(&line) {
                let _ = writeln!(w, "{text}");
                let _ = w.flush();
            }
        }
    }

    fn attempt(&self, body: &Value, attempt: u32) -> Attempt {
        let mut builder = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) => {
                self.audit(AuditLine {
                    request: body,
                    attempt,
                    status: None,
                    response: None,
                    error: Some(e.to_string()),
                });
                return Attempt::Retry(BackendError::Transport { attempts: attempt, message: e.to_string() });
            }
        };
        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry(BackendError::Transport { attempts: attempt, message: e.to_string() })
            }
        };
        self.audit(AuditLine {
            request: body,
            attempt,
            status: Some(status.as_u16()),
            response: Some(&text),
            error: None,
        });
        match status {
            s if s.is_success() => match extract_content(&text) {
                Ok(content) => Attempt::Done(content),
                Err(e) => Attempt::Fail(e),
            },
            StatusCode::TOO_MANY_REQUESTS => Attempt::Retry(BackendError::RateLimited { attempts: attempt }),
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
                Attempt::Fail(BackendError::Auth(format!("HTTP {}: {}", status.as_u16(), truncate(&text))))
            }
            _ => Attempt::Fail(BackendError::Status { status: status.as_u16(), body: truncate(&text) }),
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(200).collect()
}

#[derive(Deserialize)]
struct ChatResponse {
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

/// Pull `choices[0].message.content` out of a chat-completions body.
pub(crate) fn extract_content(body: &str) -> Result<String, BackendError> {
    let parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::MalformedResponse("no choices".into()))?
        .message
        .content
        .ok_or_else(|| BackendError::MalformedResponse("choice has no content".into()))
}

impl Backend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        let body = self.body(request);
        let _permit = self.in_flight.acquire();
        let policy = &self.config.retry;
        let mut attempt = 1;
        loop {
            match self.attempt(&body, attempt) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempt >= policy.max_attempts => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("attempt {attempt} failed ({e}); backing off");
                    thread::sleep(policy.backoff(attempt));
                    attempt += 1;
                }
            }
        }
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }
}
