//! Text-generation backends.
//!
//! Both implementations take a [`GenerationRequest`] and return the raw
//! model text. [`HttpBackend`] talks to a chat-completions server;
//! [`MockRespondentModel`] answers from per-question logits so whole runs
//! can be reproduced offline.

mod http;
mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig, RetryPolicy, DEFAULT_API_KEY_ENV};
pub use mock::{
    entropy, tempered_softmax, LogitKey, MockRespondentModel, REFUSAL_TEXT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

/// One question slot the harness is asking about in a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedQuestion {
    /// 1-based position of the question in its condition.
    pub slot: usize,
    pub id: String,
    pub labels: Vec<char>,
}

/// Harness-side metadata describing what a request asks. Never sent over
/// the wire; the mock backend uses it in place of reading the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestTag {
    pub study: String,
    pub condition: String,
    /// True when the prompt asks every question at once.
    pub batch: bool,
    pub questions: Vec<TaggedQuestion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub tag: Option<RequestTag>,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("mock model has no logits for {study}/{condition}/{question}")]
    MissingLogits {
        study: String,
        condition: String,
        question: String,
    },
    #[error("{0}")]
    Config(String),
}

impl BackendError {
    /// Errors that should abort a whole run rather than discard one study.
    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::Auth(_) | BackendError::Config(_))
    }
}

pub trait Backend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError>;

    /// Upper bound on concurrent `generate` calls worth issuing.
    fn max_in_flight(&self) -> usize {
        1
    }

    /// Whether output is a pure function of the request (no wall clock).
    fn is_deterministic(&self) -> bool {
        false
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        (**self).generate(request)
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        (**self).generate(request)
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}
