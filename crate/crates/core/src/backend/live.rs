//! Client for OpenAI-compatible `POST <base>/chat/completions` endpoints using
//! the `functions` / `function_call` wire format.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendRequest, BackendResponse};
use crate::conversation::{FunctionCall, Message, Role};
use crate::registry::FunctionDescriptor;

pub const API_BASE_ENV: &str = "FCFLOW_API_BASE";
pub const API_KEY_ENV: &str = "FCFLOW_API_KEY";
pub const MODEL_ENV: &str = "FCFLOW_MODEL";

const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";
const DEFAULT_MODEL: &str = "gpt-4o-mini";

#[derive(Clone)]
pub struct LiveConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl std::fmt::Debug for LiveConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("model", &self.model)
            .field("timeout", &self.timeout)
            .field("max_retries", &self.max_retries)
            .field("backoff", &self.backoff)
            .finish()
    }
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_API_BASE.to_string(),
            api_key: None,
            model: DEFAULT_MODEL.to_string(),
            timeout: Duration::from_secs(60),
            max_retries: 2,
            backoff: Duration::from_millis(500),
        }
    }
}

impl LiveConfig {
    pub fn from_env() -> Self {
        let var = |name| std::env::var(name).ok().filter(|v: &String| !v.is_empty());
        let defaults = Self::default();
        Self {
            base_url: var(API_BASE_ENV).unwrap_or(defaults.base_url.clone()),
            api_key: var(API_KEY_ENV),
            model: var(MODEL_ENV).unwrap_or(defaults.model.clone()),
            ..defaults
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    functions: &'a [FunctionDescriptor],
    temperature: f32,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    function_call: Option<&'a FunctionCall>,
}

impl<'a> From<&'a Message> for WireMessage<'a> {
    fn from(message: &'a Message) -> Self {
        let role = match message.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        // Assistant function-call turns carry `null` content on the wire.
        let content = match (&message.function_call, message.content.is_empty()) {
            (Some(_), true) => None,
            _ => Some(message.content.as_str()),
        };
        Self {
            role,
            content,
            function_call: message.function_call.as_ref(),
        }
    }
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    function_call: Option<FunctionCall>,
    #[serde(default)]
    tool_calls: Option<Vec<WireToolCall>>,
}

#[derive(Deserialize)]
struct WireToolCall {
    function: FunctionCall,
}

/// Maps a chat-completions response body onto a [`BackendResponse`].
///
/// A function call (legacy `function_call` or a single `tool_calls` entry)
/// maps to [`BackendResponse::FunctionCall`]; a message without one and with
/// `finish_reason: "stop"` maps to [`BackendResponse::Final`].
pub fn map_response_body(body: &str) -> Result<BackendResponse, BackendError> {
    let response: WireResponse = serde_json::from_str(body)
        .map_err(|e| BackendError::Protocol(format!("malformed response body: {e}")))?;
    let choice = response
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let message = choice.message;
    if let Some(call) = message.function_call {
        return Ok(BackendResponse::FunctionCall(call));
    }
    match message.tool_calls.as_deref() {
        Some([]) | None => {}
        Some([_]) => {
            let call = message.tool_calls.into_iter().flatten().next().expect("one tool call");
            return Ok(BackendResponse::FunctionCall(call.function));
        }
        Some(calls) => {
            return Err(BackendError::Protocol(format!(
                "{} parallel tool calls are not supported",
                calls.len()
            )))
        }
    }
    match choice.finish_reason.as_deref() {
        Some("stop") => Ok(BackendResponse::final_message(message.content.unwrap_or_default())),
        Some(other) => Err(BackendError::Protocol(format!(
            "response ended with finish_reason `{other}` and no function call"
        ))),
        None => Err(BackendError::Protocol(
            "response has neither a function call nor a finish_reason".into(),
        )),
    }
}

pub struct LiveBackend {
    client: reqwest::Client,
    config: LiveConfig,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self { client, config })
    }

    /// Configuration from the environment. The hosted default endpoint
    /// requires a key; a custom `FCFLOW_API_BASE` may run without one.
    pub fn from_env() -> Result<Self, BackendError> {
        let config = LiveConfig::from_env();
        if config.api_key.is_none() && config.base_url == DEFAULT_API_BASE {
            return Err(BackendError::Config(format!(
                "{API_KEY_ENV} is not set; export it or point {API_BASE_ENV} at a server that needs no key"
            )));
        }
        Self::new(config)
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    async fn send_once(&self, body: &WireRequest<'_>) -> Result<String, BackendError> {
        let mut request = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        Ok(text)
    }
}

#[async_trait]
impl Backend for LiveBackend {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let body = WireRequest {
            model: request.model.as_deref().unwrap_or(&self.config.model),
            messages: request.messages.iter().map(WireMessage::from).collect(),
            functions: &request.functions,
            temperature: request.temperature,
        };
        let mut attempt = 0;
        loop {
            match self.send_once(&body).await {
                Ok(text) => return map_response_body(&text),
                Err(err) if err.is_retryable() && attempt < self.config.max_retries => {
                    let delay = self.config.backoff * 2u32.pow(attempt);
                    tracing::warn!(%err, attempt, "retrying backend request in {delay:?}");
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }

    fn name(&self) -> &str {
        "live"
    }
}
