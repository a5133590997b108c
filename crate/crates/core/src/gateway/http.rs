use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::retry::{AttemptError, RetryPolicy};
use super::{Backend, CompletionRequest, GatewayError};

pub const API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `https://host/v1`.
    pub base_url: String,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "https://generativelanguage.googleapis.com/v1beta/openai".into(),
            timeout_secs: 120,
        }
    }
}

/// Chat-completion client: one user message per request, no streaming.
pub struct HttpBackend {
    client: Client,
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl HttpBackend {
    /// Reads the API key from `LLM_API_KEY`.
    pub fn from_env(config: &HttpConfig, retry: RetryPolicy) -> Result<Self, GatewayError> {
        Self::new(config, std::env::var(API_KEY_ENV).ok(), retry)
    }

    pub fn new(
        config: &HttpConfig,
        api_key: Option<String>,
        retry: RetryPolicy,
    ) -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::BackendUnavailable {
                attempts: 0,
                reason: e.to_string(),
            })?;
        Ok(HttpBackend {
            client,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key,
            retry,
        })
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<String, AttemptError> {
        let body = json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        });
        let mut builder = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| AttemptError::Retryable {
            reason: e.to_string(),
            retry_after: None,
            rate_limited: false,
        })?;
        let status = response.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            let retry_after = response
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(AttemptError::Retryable {
                reason: "HTTP 429".into(),
                retry_after,
                rate_limited: true,
            });
        }
        if status.is_server_error() || status == StatusCode::REQUEST_TIMEOUT {
            return Err(AttemptError::Retryable {
                reason: format!("HTTP {}", status.as_u16()),
                retry_after: None,
                rate_limited: false,
            });
        }
        let text = response.text().map_err(|e| AttemptError::Retryable {
            reason: e.to_string(),
            retry_after: None,
            rate_limited: false,
        })?;
        if !status.is_success() {
            return Err(AttemptError::Fatal(GatewayError::Rejected {
                status: status.as_u16(),
                body: text,
            }));
        }
        Ok(extract_content(&text))
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Option<Message>,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

/// First choice's message content; empty when absent so the gateway reports
/// `EmptyResponse`.
fn extract_content(body: &str) -> String {
    serde_json::from_str::<ChatResponse>(body)
        .ok()
        .and_then(|r| r.choices.into_iter().next())
        .and_then(|c| c.message)
        .and_then(|m| m.content)
        .unwrap_or_default()
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.retry
            .execute(|_| self.attempt(request), &mut |d| std::thread::sleep(d))
    }
}
