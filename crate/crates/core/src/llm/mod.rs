//! Chat-completion abstraction shared by every model call in the engine.
//!
//! Backends only move bytes. [`LlmClient`] layers budget checks, transport
//! retries, ledger accounting and the JSON repair loop on top of them.

mod http;
mod json;
mod mock;
mod replay;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use http::HttpBackend;
pub use json::{extract_json, render_fenced, JsonError};
pub use mock::{Fallback, FnBackend, MockRule, MockScript, ScriptedMock};
pub use replay::{ReplayBackend, ReplayMode, StoreRow, StoredResponse};

use crate::run_store::{Ledger, LedgerTotals};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
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
}

/// Why a call was made; every ledger row carries one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PurposeTag {
    Forward,
    GradLoss,
    GradCall,
    GradWorkflow,
    OptimCall,
    OptimWorkflow,
    InitExecutor,
    Bootstrap,
    Judge,
}

impl PurposeTag {
    pub const ALL: [PurposeTag; 9] = [
        PurposeTag::Forward,
        PurposeTag::GradLoss,
        PurposeTag::GradCall,
        PurposeTag::GradWorkflow,
        PurposeTag::OptimCall,
        PurposeTag::OptimWorkflow,
        PurposeTag::InitExecutor,
        PurposeTag::Bootstrap,
        PurposeTag::Judge,
    ];

    pub fn is_meta(self) -> bool {
        !matches!(self, PurposeTag::Forward | PurposeTag::Bootstrap)
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| format!("{p:?}") == s)
    }
}

impl fmt::Display for PurposeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub purpose: PurposeTag,
}

impl ChatRequest {
    /// Replay key: SHA-256 over canonical JSON of (model, messages, temperature).
    pub fn key(&self) -> String {
        let v = serde_json::json!({
            "model": self.model_id,
            "messages": self.messages,
            "temperature": self.temperature,
        });
        let digest = Sha256::digest(serde_json::to_string(&v).expect("json").as_bytes());
        hex::encode(digest)
    }

    pub fn system_prompt(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }

    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {message}")]
    Transport { message: String, retriable: bool },
    #[error("replay miss: no stored response for request {key}")]
    ReplayMiss { key: String },
    #[error("backend error: {0}")]
    Other(String),
}

/// A chat-completion provider. Implementations must tolerate concurrent calls.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("replay miss: no stored response for request {key}")]
    ReplayMiss { key: String },
    #[error("budget exceeded ({calls} calls, {cost_micro_usd} micro-USD)")]
    BudgetExceeded { calls: u64, cost_micro_usd: u64 },
    #[error("no usable JSON after {attempts} attempts: {source}")]
    Json {
        attempts: u32,
        #[source]
        source: JsonError,
    },
    #[error("{0}")]
    Backend(String),
}

impl LlmError {
    /// Fatal errors abort the run instead of degrading one sample.
    pub fn is_fatal(&self) -> bool {
        matches!(self, LlmError::ReplayMiss { .. } | LlmError::BudgetExceeded { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    /// Re-asks after a JSON parse failure.
    pub json_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            json_retries: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_calls: Option<u64>,
    pub max_cost_usd: Option<f64>,
}

impl Budget {
    fn exceeded(&self, t: LedgerTotals) -> bool {
        if let Some(max) = self.max_calls {
            if t.calls >= max {
                return true;
            }
        }
        if let Some(max) = self.max_cost_usd {
            if t.cost_micro_usd as f64 >= max * 1e6 {
                return true;
            }
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub executor_model: String,
    pub meta_model: String,
    pub executor_temperature: f64,
    pub meta_temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            executor_model: "mock-executor".into(),
            meta_model: "mock-meta".into(),
            executor_temperature: 0.2,
            meta_temperature: 0.0,
            max_output_tokens: 4096,
        }
    }
}

pub const JSON_REPAIR_INSTRUCTION: &str =
    "Your previous reply could not be parsed as the requested JSON. Reply again with valid JSON only.";

/// The engine's single door to a model.
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    ledger: Arc<Ledger>,
    pub settings: ModelSettings,
    pub retry: RetryPolicy,
    pub budget: Budget,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>, ledger: Arc<Ledger>, settings: ModelSettings) -> Self {
        Self {
            backend,
            ledger,
            settings,
            retry: RetryPolicy::default(),
            budget: Budget::default(),
        }
    }

    pub fn ledger(&self) -> &Arc<Ledger> {
        &self.ledger
    }

    pub fn executor_request(&self, purpose: PurposeTag, messages: Vec<Message>) -> ChatRequest {
        ChatRequest {
            model_id: self.settings.executor_model.clone(),
            messages,
            temperature: self.settings.executor_temperature,
            max_output_tokens: self.settings.max_output_tokens,
            purpose,
        }
    }

    pub fn meta_request(&self, purpose: PurposeTag, system: &str, user: &str) -> ChatRequest {
        ChatRequest {
            model_id: self.settings.meta_model.clone(),
            messages: vec![Message::system(system), Message::user(user)],
            temperature: self.settings.meta_temperature,
            max_output_tokens: self.settings.max_output_tokens,
            purpose,
        }
    }

    /// One logical call: budget check, retried transport, one ledger row.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let totals = self.ledger.totals();
        if self.budget.exceeded(totals) {
            return Err(LlmError::BudgetExceeded {
                calls: totals.calls,
                cost_micro_usd: totals.cost_micro_usd,
            });
        }
        let attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.complete(request) {
                Ok(resp) => {
                    self.ledger
                        .record_call(request.purpose, &request.model_id, resp.input_tokens, resp.output_tokens);
                    return Ok(resp);
                }
                Err(BackendError::ReplayMiss { key }) => return Err(LlmError::ReplayMiss { key }),
                Err(BackendError::Transport { message, retriable }) => {
                    if !retriable || attempt >= attempts {
                        return Err(LlmError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    std::thread::sleep(self.retry.base_delay * 2u32.saturating_pow(attempt - 1));
                }
                Err(BackendError::Other(m)) => return Err(LlmError::Backend(m)),
            }
        }
    }

    /// Calls the model and decodes a JSON reply into `T`, re-asking with a
    /// repair instruction when the reply does not parse.
    pub fn complete_json<T: DeserializeOwned>(&self, request: &ChatRequest) -> Result<(T, ChatResponse), LlmError> {
        let mut req = request.clone();
        let attempts = self.retry.json_retries + 1;
        let mut last_err = None;
        for _ in 0..attempts {
            let resp = self.complete(&req)?;
            match decode::<T>(&resp.content) {
                Ok(v) => return Ok((v, resp)),
                Err(e) => {
                    last_err = Some(e);
                    req.messages.push(Message::user(JSON_REPAIR_INSTRUCTION));
                }
            }
        }
        Err(LlmError::Json {
            attempts,
            source: last_err.expect("at least one attempt"),
        })
    }
}

/// Extracts JSON from `content` and deserializes it.
pub fn decode<T: DeserializeOwned>(content: &str) -> Result<T, JsonError> {
    let value = extract_json(content)?;
    serde_json::from_value(value).map_err(|e| JsonError::Schema {
        raw: content.to_string(),
        message: e.to_string(),
    })
}
