//! Blocking HTTPS transport speaking the chat-completions schema.
//!
//! Request body is the provider-compatible shape:
//! `{model, messages: [{role: system}, {role: user}], temperature}`.
//! 429 and 5xx responses and transport timeouts are retried with
//! exponential backoff up to the policy's limit; other 4xx statuses
//! fail immediately.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{ChatEndpoint, ChatRequest, ChatResponse, ChatUsage, RunnerError, UsdMicros};

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            base_delay_ms: 250,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << attempt.min(16)))
    }
}

pub struct HttpEndpoint {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl HttpEndpoint {
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self, RunnerError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RunnerError::Transport {
                model: String::new(),
                detail: e.to_string(),
            })?;
        Ok(HttpEndpoint {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            retry,
        })
    }

    /// Read the API key from the named environment variable. An empty
    /// variable name means the endpoint needs no credential (local
    /// mock servers).
    pub fn from_env(
        base_url: impl Into<String>,
        api_key_env: &str,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self, RunnerError> {
        let api_key = if api_key_env.is_empty() {
            None
        } else {
            Some(
                std::env::var(api_key_env)
                    .map_err(|_| RunnerError::MissingCredential(api_key_env.to_string()))?,
            )
        };
        Self::new(base_url, api_key, retry, timeout)
    }
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
    /// OpenRouter reports spend in USD under `cost`.
    #[serde(default)]
    cost: Option<f64>,
}

impl ChatEndpoint for HttpEndpoint {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, RunnerError> {
        let url = format!("{}/chat/completions", self.base_url);
        let body = json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
        });

        let mut attempt = 0u32;
        loop {
            let mut req = self.client.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let outcome = req.send();
            match outcome {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let wire: WireResponse =
                            resp.json().map_err(|e| RunnerError::Transport {
                                model: request.model.clone(),
                                detail: format!("malformed response body: {e}"),
                            })?;
                        let choice =
                            wire.choices
                                .into_iter()
                                .next()
                                .ok_or_else(|| RunnerError::ProviderError {
                                    model: request.model.clone(),
                                    status: status.as_u16(),
                                    detail: "response has no choices".into(),
                                })?;
                        let usage = wire.usage.unwrap_or(WireUsage {
                            prompt_tokens: None,
                            completion_tokens: None,
                            cost: None,
                        });
                        return Ok(ChatResponse {
                            text: choice.message.content,
                            usage: ChatUsage {
                                prompt_tokens: usage.prompt_tokens,
                                completion_tokens: usage.completion_tokens,
                                reported_cost: usage.cost.map(UsdMicros::from_dollars),
                            },
                            retries: attempt,
                            timestamp: chrono::Utc::now().to_rfc3339(),
                        });
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(RunnerError::ProviderError {
                            model: request.model.clone(),
                            status: status.as_u16(),
                            detail: resp.text().unwrap_or_default(),
                        });
                    }
                    if attempt >= self.retry.max_retries {
                        return Err(if status.as_u16() == 429 {
                            RunnerError::RateLimited {
                                model: request.model.clone(),
                                attempts: attempt + 1,
                            }
                        } else {
                            RunnerError::ProviderError {
                                model: request.model.clone(),
                                status: status.as_u16(),
                                detail: format!("still failing after {} attempts", attempt + 1),
                            }
                        });
                    }
                }
                Err(e) => {
                    if attempt >= self.retry.max_retries {
                        return Err(if e.is_timeout() {
                            RunnerError::Timeout {
                                model: request.model.clone(),
                                attempts: attempt + 1,
                            }
                        } else {
                            RunnerError::Transport {
                                model: request.model.clone(),
                                detail: e.to_string(),
                            }
                        });
                    }
                }
            }
            std::thread::sleep(self.retry.delay(attempt));
            attempt += 1;
        }
    }
}
