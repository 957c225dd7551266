//! OpenAI-compatible `/chat/completions` client.

use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    /// `api_key_env` names the environment variable holding the bearer token.
    pub fn new(endpoint: impl Into<String>, api_key_env: Option<&str>, timeout: Duration) -> Result<Self, BackendError> {
        let api_key = match api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| BackendError::Other(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Other(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            api_key,
            client,
        })
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint)
    }
}

pub(crate) fn request_body(request: &ChatRequest) -> serde_json::Value {
    json!({
        "model": request.model_id,
        "messages": request.messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    })
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let started = Instant::now();
        let mut builder = self.client.post(self.url()).json(&request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| BackendError::Transport {
            message: e.to_string(),
            retriable: true,
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport {
            message: e.to_string(),
            retriable: true,
        })?;
        if !status.is_success() {
            return Err(BackendError::Transport {
                message: format!("HTTP {status}: {}", text.chars().take(300).collect::<String>()),
                retriable: status.as_u16() == 429 || status.is_server_error(),
            });
        }
        let body: Completion = serde_json::from_str(&text).map_err(|e| BackendError::Transport {
            message: format!("unexpected response body: {e}"),
            retriable: false,
        })?;
        let content = body
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Transport {
                message: "response has no choices[0].message.content".into(),
                retriable: false,
            })?;
        let usage = body.usage.unwrap_or_default();
        Ok(ChatResponse {
            content,
            input_tokens: usage.prompt_tokens,
            output_tokens: usage.completion_tokens,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}
