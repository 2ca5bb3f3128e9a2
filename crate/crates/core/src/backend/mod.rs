//! Backends answer one request at a time with either a function-call choice
//! or a final message carrying the stop flag.

mod live;
mod scripted;

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::conversation::{FunctionCall, Message};
use crate::registry::FunctionDescriptor;

pub use live::{LiveBackend, LiveConfig, API_BASE_ENV, API_KEY_ENV, MODEL_ENV};
pub use scripted::{MatchSpec, ResponseTemplate, ScriptError, ScriptRule, ScriptedBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    /// Overrides the backend's configured model when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub messages: Vec<Message>,
    pub functions: Vec<FunctionDescriptor>,
    #[serde(default)]
    pub temperature: f32,
}

impl BackendRequest {
    pub fn new(messages: Vec<Message>, functions: Vec<FunctionDescriptor>) -> Self {
        Self {
            model: None,
            messages,
            functions,
            temperature: 0.0,
        }
    }

    /// Content of the most recent user message, or `""`.
    pub fn latest_user_message(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == crate::conversation::Role::User)
            .map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendResponse {
    FunctionCall(FunctionCall),
    Final { content: String },
}

impl BackendResponse {
    pub fn function_call(name: impl Into<String>, arguments: impl Into<String>) -> Self {
        Self::FunctionCall(FunctionCall {
            name: name.into(),
            arguments: arguments.into(),
        })
    }

    pub fn final_message(content: impl Into<String>) -> Self {
        Self::Final {
            content: content.into(),
        }
    }

    /// Final responses, and only those, carry the stop flag.
    pub fn stop(&self) -> bool {
        matches!(self, Self::Final { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("no script rule matches the latest user message {latest:?}")]
    NoMatchingRule { latest: String },
    #[error("backend configuration error: {0}")]
    Config(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Transport(_) => true,
            Self::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;

    fn name(&self) -> &str {
        "backend"
    }
}

#[async_trait]
impl<T: Backend + ?Sized> Backend for Arc<T> {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request).await
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}
