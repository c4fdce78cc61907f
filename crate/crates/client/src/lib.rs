//! OpenAI-compatible completions client.
//!
//! Speaks the `/v1/completions` protocol (or `/v1/chat/completions` when
//! the descriptor selects the chat variant), retries transient failures
//! with exponential backoff, and attaches a numeric logit-bias map when
//! the endpoint supports it. The API key comes from the `SIGLLM_API_KEY`
//! environment variable and is sent as a bearer token.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use sigllm_core::backend::{
    build_numeric_bias, Backend, BackendDescriptor, BackendError, BackendKind, BiasStrategy,
    CompletionRequest, CompletionResponse, TokenUsage,
};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "SIGLLM_API_KEY";

/// Retry behavior for transient failures (timeouts, 429, 5xx).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryConfig {
    pub max_retries: u32,
    pub initial_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_delay_ms: 500,
            max_delay_ms: 10_000,
        }
    }
}

/// HTTP backend for OpenAI-compatible endpoints.
pub struct HttpBackend {
    descriptor: BackendDescriptor,
    retry: RetryConfig,
    bias_strategy: BiasStrategy,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    /// Build a client from a validated descriptor. Per-window inference
    /// can take several seconds, so the request timeout defaults to two
    /// minutes.
    pub fn new(descriptor: BackendDescriptor) -> Result<Self, BackendError> {
        Self::with_retry(descriptor, RetryConfig::default())
    }

    pub fn with_retry(
        descriptor: BackendDescriptor,
        retry: RetryConfig,
    ) -> Result<Self, BackendError> {
        if descriptor.kind != BackendKind::HttpOpenAiCompatible {
            return Err(BackendError::InvalidRequest(
                "HttpBackend requires an http-openai-compatible descriptor".into(),
            ));
        }
        descriptor.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        Ok(Self {
            descriptor,
            retry,
            bias_strategy: BiasStrategy::default(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            client,
        })
    }

    pub fn with_bias_strategy(mut self, strategy: BiasStrategy) -> Self {
        self.bias_strategy = strategy;
        self
    }

    /// Override the key read from the environment.
    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    fn url(&self) -> String {
        let base = self
            .descriptor
            .endpoint
            .as_deref()
            .expect("validated descriptor")
            .trim_end_matches('/');
        if self.descriptor.chat_style {
            format!("{base}/v1/chat/completions")
        } else {
            format!("{base}/v1/completions")
        }
    }

    fn backoff_delay(&self, attempt: u32) -> Duration {
        let delay = self.retry.initial_delay_ms.saturating_mul(1u64 << attempt);
        Duration::from_millis(delay.min(self.retry.max_delay_ms))
    }

    fn execute_once(&self, body: &WireRequest) -> Result<CompletionResponse, TransientOrFatal> {
        let started = Instant::now();
        let mut builder = self
            .client
            .post(self.url())
            .header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .json(body)
            .send()
            .map_err(|e| TransientOrFatal::Transient(e.to_string()))?;

        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            let text = response.text().unwrap_or_default();
            return Err(TransientOrFatal::Transient(format!("{status}: {text}")));
        }
        if status.is_client_error() {
            let text = response.text().unwrap_or_default();
            // endpoints reject windows of identical values with a
            // distinctive message; surface that case separately
            if text.to_ascii_lowercase().contains("repetitive prompt") {
                return Err(TransientOrFatal::Fatal(BackendError::RepetitiveInput(text)));
            }
            return Err(TransientOrFatal::Fatal(BackendError::Rejected(format!(
                "{status}: {text}"
            ))));
        }
        let wire: WireResponse = response
            .json()
            .map_err(|e| TransientOrFatal::Transient(format!("malformed response: {e}")))?;

        let samples: Vec<String> = wire
            .choices
            .into_iter()
            .map(|c| match (c.text, c.message) {
                (Some(text), _) => text,
                (None, Some(message)) => message.content,
                (None, None) => String::new(),
            })
            .collect();
        let usage = wire
            .usage
            .map(|u| TokenUsage {
                prompt: u.prompt_tokens,
                completion: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(CompletionResponse {
            samples,
            usage,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

enum TransientOrFatal {
    Transient(String),
    Fatal(BackendError),
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let body = WireRequest::build(request, &self.descriptor, &self.bias_strategy);

        let mut last_reason = String::new();
        let attempts = self.retry.max_retries + 1;
        for attempt in 0..attempts {
            match self.execute_once(&body) {
                Ok(response) => {
                    if response.samples.len() != request.n_samples {
                        return Err(BackendError::Rejected(format!(
                            "endpoint returned {} sample(s), requested {}",
                            response.samples.len(),
                            request.n_samples
                        )));
                    }
                    return Ok(response);
                }
                Err(TransientOrFatal::Fatal(e)) => return Err(e),
                Err(TransientOrFatal::Transient(reason)) => {
                    last_reason = reason;
                    if attempt + 1 < attempts {
                        let delay = self.backoff_delay(attempt);
                        log::warn!(
                            "attempt {}/{} failed ({}); retrying in {:?}",
                            attempt + 1,
                            attempts,
                            last_reason,
                            delay
                        );
                        std::thread::sleep(delay);
                    }
                }
            }
        }
        Err(BackendError::Unavailable {
            attempts,
            reason: last_reason,
        })
    }

    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }
}

// ============================================================================
// Wire format
// ============================================================================

/// Request document for both the completions and chat protocols; unused
/// fields stay off the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub messages: Option<Vec<WireMessage>>,
    pub n: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logit_bias: Option<BTreeMap<String, i32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    pub content: String,
}

impl WireRequest {
    pub fn build(
        request: &CompletionRequest,
        descriptor: &BackendDescriptor,
        bias_strategy: &BiasStrategy,
    ) -> Self {
        let bias = if request.numeric_only {
            let map = build_numeric_bias(descriptor.supports_logit_bias, bias_strategy);
            if map.is_empty() {
                None
            } else {
                Some(
                    map.into_iter()
                        .map(|(id, weight)| (id.to_string(), weight))
                        .collect(),
                )
            }
        } else {
            None
        };
        let (prompt, messages) = if descriptor.chat_style {
            (
                None,
                Some(vec![WireMessage {
                    role: "user".into(),
                    content: request.context.clone(),
                }]),
            )
        } else {
            (Some(request.context.clone()), None)
        };
        Self {
            model: descriptor.model.clone().expect("validated descriptor"),
            prompt,
            messages,
            n: request.n_samples,
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            logit_bias: bias,
        }
    }
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    message: Option<WireChatMessage>,
}

#[derive(Debug, Deserialize)]
struct WireChatMessage {
    #[serde(default)]
    content: String,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}
