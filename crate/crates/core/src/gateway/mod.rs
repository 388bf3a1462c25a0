//! Chat-completion gateway.
//!
//! Every LLM call in the engine goes through [`Gateway::complete`], which
//! validates the request, retries transient failures and counts logical
//! calls. Backends are either an OpenAI-compatible HTTP endpoint or a
//! deterministic script.

mod http;
mod script;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig, API_KEY_ENV, BASE_URL_ENV};
pub use script::{load_script, Script, ScriptEntry, ScriptError, ScriptedBackend};

/// Sampling temperature used for every engine-internal call.
pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
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
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub model: String,
    pub max_output: Option<u32>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            seed: Some(DEFAULT_SEED),
            model: model.into(),
            max_output: None,
        }
    }

    pub fn with_sampling(mut self, params: &SamplingParams) -> Self {
        self.temperature = params.temperature;
        self.seed = params.seed;
        self.max_output = params.max_output;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| GatewayError::InvalidRequest("no messages".into()))?;
        if first.role == Role::Assistant {
            return Err(GatewayError::InvalidRequest(
                "first message must be system or user".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_output == Some(0) {
            return Err(GatewayError::InvalidRequest("max_output must be positive".into()));
        }
        Ok(())
    }
}

/// Model id plus sampling parameters for one engine role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub model: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_output: Option<u32>,
}

impl SamplingParams {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: DEFAULT_TEMPERATURE,
            seed: Some(DEFAULT_SEED),
            max_output: None,
        }
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest::new(self.model.clone(), messages).with_sampling(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_units: u64,
    pub output_units: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("model returned an empty response")]
    EmptyResponse,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("call budget of {limit} gateway calls exhausted")]
    BudgetExhausted { limit: u64 },
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::RateLimited(_))
    }
}

/// Something that can answer a single chat request.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<F> ChatBackend for F
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts per logical call, including the first.
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles for every further attempt.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    /// Wait after failed attempt number `attempt` (1-based).
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

/// Shared entry point for all chat completions.
///
/// The call counter counts logical calls: a call that needed retries is
/// counted once. An optional limit turns the counter into a hard budget.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    retry: RetryPolicy,
    calls: AtomicU64,
    limit: AtomicU64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("retry", &self.retry)
            .field("calls", &self.calls())
            .field("limit", &self.call_limit())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: impl ChatBackend + 'static) -> Self {
        Self::with_retry(backend, RetryPolicy::default())
    }

    pub fn with_retry(backend: impl ChatBackend + 'static, retry: RetryPolicy) -> Self {
        Self {
            backend: Box::new(backend),
            retry,
            calls: AtomicU64::new(0),
            limit: AtomicU64::new(u64::MAX),
        }
    }

    pub fn scripted(script: Script) -> Self {
        Self::with_retry(ScriptedBackend::new(script), RetryPolicy::no_delay(3))
    }

    /// Logical calls issued so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn call_limit(&self) -> Option<u64> {
        match self.limit.load(Ordering::SeqCst) {
            u64::MAX => None,
            n => Some(n),
        }
    }

    /// Caps the total number of logical calls (counted from gateway creation).
    pub fn set_call_limit(&self, limit: Option<u64>) {
        self.limit.store(limit.unwrap_or(u64::MAX), Ordering::SeqCst);
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let limit = self.limit.load(Ordering::SeqCst);
        self.calls
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < limit).then_some(n + 1))
            .map_err(|_| GatewayError::BudgetExhausted { limit })?;

        let mut attempt = 1;
        loop {
            match self.backend.send(request) {
                Ok(resp) => {
                    if resp.finish_reason == FinishReason::Stop && resp.content.is_empty() {
                        return Err(GatewayError::EmptyResponse);
                    }
                    return Ok(resp);
                }
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    let wait = self.retry.delay_after(attempt);
                    log::warn!("gateway attempt {attempt} failed ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
