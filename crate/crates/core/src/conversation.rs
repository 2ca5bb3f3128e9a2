//! The function-calling loop.
//!
//! A conversation starts with a system preamble and the user's instruction.
//! Each round sends the accumulated messages plus the function descriptors to
//! the backend. When it picks a function, the call is validated and
//! dispatched to the engine, and two messages are appended: the assistant's
//! function-call choice and a user message announcing the new future id. The
//! loop ends when the backend answers with the stop flag.
//!
//! A call that fails validation or dispatch is forwarded back to the backend
//! as an error message so it can propose an alternative, at most
//! `retry_bound - 1` times in a row before the conversation is aborted.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, BackendRequest, BackendResponse};
use crate::engine::{Engine, EngineError, FutureId, FutureState};
use crate::registry::{validate_arguments, ArgumentError, BoundArguments, CallVariant, FunctionDescriptor};
use crate::transcript::{AbortReason, Transcript, TranscriptEvent};

pub const DEFAULT_RETRY_BOUND: u32 = 3;
pub const DEFAULT_BUDGET: u64 = 16_384;
pub const DEFAULT_MAX_DISPATCHES: u32 = 64;

/// Fixed token overhead charged per message by [`estimate_tokens`].
pub const MESSAGE_OVERHEAD_TOKENS: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionCall {
    pub name: String,
    /// Argument text exactly as the backend produced it.
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function_call: Option<FunctionCall>,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
            function_call: None,
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
            function_call: None,
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
            function_call: None,
        }
    }

    pub fn assistant_call(call: FunctionCall) -> Self {
        Self {
            role: Role::Assistant,
            content: String::new(),
            function_call: Some(call),
        }
    }

    fn char_count(&self) -> u64 {
        let call = self
            .function_call
            .as_ref()
            .map_or(0, |c| c.name.chars().count() + c.arguments.chars().count());
        (self.content.chars().count() + call) as u64
    }
}

fn quarter_ceil(chars: u64) -> u64 {
    chars.div_ceil(4)
}

/// Deterministic token estimate: every message costs `ceil(chars / 4) + 4`
/// and every descriptor `ceil(chars / 4)` of its compact JSON form.
pub fn estimate_tokens(messages: &[Message], descriptors: &[FunctionDescriptor]) -> u64 {
    let messages: u64 = messages
        .iter()
        .map(|m| quarter_ceil(m.char_count()) + MESSAGE_OVERHEAD_TOKENS)
        .sum();
    let descriptors: u64 = descriptors
        .iter()
        .map(|d| {
            let json = serde_json::to_string(d).expect("descriptors serialize");
            quarter_ceil(json.chars().count() as u64)
        })
        .sum();
    messages + descriptors
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversationStatus {
    Active,
    Done,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepResult {
    Dispatched { function: String, future_id: FutureId },
    Finished { content: String },
    Aborted(AbortReason),
}

#[derive(Debug, thiserror::Error)]
pub enum ConversationError {
    #[error("token budget must be positive")]
    InvalidBudget,
    #[error("conversation is no longer active")]
    NotActive,
    #[error("the registry has no tasks")]
    EmptyRegistry,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Why a function call could not be dispatched. The text is what gets
/// forwarded to the backend.
#[derive(Debug, thiserror::Error)]
pub enum DispatchError {
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error(transparent)]
    Arguments(#[from] ArgumentError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type EventObserver = Arc<dyn Fn(&TranscriptEvent) + Send + Sync>;

#[derive(Clone)]
pub struct ConversationOptions {
    pub retry_bound: u32,
    pub max_dispatches: u32,
    pub model: Option<String>,
    pub temperature: f32,
    pub observer: Option<EventObserver>,
}

impl Default for ConversationOptions {
    fn default() -> Self {
        Self {
            retry_bound: DEFAULT_RETRY_BOUND,
            max_dispatches: DEFAULT_MAX_DISPATCHES,
            model: None,
            temperature: 0.0,
            observer: None,
        }
    }
}

impl std::fmt::Debug for ConversationOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConversationOptions")
            .field("retry_bound", &self.retry_bound)
            .field("max_dispatches", &self.max_dispatches)
            .field("model", &self.model)
            .field("temperature", &self.temperature)
            .finish_non_exhaustive()
    }
}

/// Validates `call` against the offered descriptors and schedules it.
pub fn dispatch(
    engine: &Engine,
    offered: &[FunctionDescriptor],
    call: &FunctionCall,
) -> Result<(BoundArguments, FutureId, FutureState), DispatchError> {
    let unknown = || DispatchError::UnknownFunction(call.name.clone());
    if !offered.iter().any(|d| d.name == call.name) {
        return Err(unknown());
    }
    let (task, variant, descriptor) = engine.registry().function(&call.name).ok_or_else(unknown)?;
    let arguments = validate_arguments(descriptor, &call.arguments)?;
    let future_id = match variant {
        CallVariant::FromFiles => engine.schedule_from_files(&task.name, &arguments)?,
        CallVariant::FromFutures => engine.schedule_from_futures(&task.name, &arguments)?,
    };
    // Scheduling indexes the future as pending before returning.
    Ok((arguments, future_id, FutureState::Pending))
}

#[derive(Debug)]
pub struct ConversationState {
    messages: Vec<Message>,
    descriptors: Vec<FunctionDescriptor>,
    dispatch_count: u32,
    token_estimate: u64,
    budget: u64,
    status: ConversationStatus,
    consecutive_failures: u32,
    events: Vec<TranscriptEvent>,
    options: ConversationOptions,
}

impl ConversationState {
    /// Starts a conversation holding `[system preamble, user instruction]`.
    pub fn new(
        preamble: &str,
        instruction: &str,
        budget: u64,
        descriptors: Vec<FunctionDescriptor>,
        options: ConversationOptions,
    ) -> Result<Self, ConversationError> {
        if budget == 0 {
            return Err(ConversationError::InvalidBudget);
        }
        let messages = vec![Message::system(preamble), Message::user(instruction)];
        let token_estimate = estimate_tokens(&messages, &descriptors);
        Ok(Self {
            messages,
            descriptors,
            dispatch_count: 0,
            token_estimate,
            budget,
            status: ConversationStatus::Active,
            consecutive_failures: 0,
            events: Vec::new(),
            options,
        })
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn descriptors(&self) -> &[FunctionDescriptor] {
        &self.descriptors
    }

    pub fn dispatch_count(&self) -> u32 {
        self.dispatch_count
    }

    pub fn token_estimate(&self) -> u64 {
        self.token_estimate
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn status(&self) -> ConversationStatus {
        self.status
    }

    pub fn events(&self) -> &[TranscriptEvent] {
        &self.events
    }

    pub fn into_transcript(self) -> Transcript {
        Transcript {
            events: self.events,
            messages: self.messages,
        }
    }

    fn push_message(&mut self, message: Message) {
        self.messages.push(message);
        self.token_estimate = estimate_tokens(&self.messages, &self.descriptors);
    }

    fn emit(&mut self, event: TranscriptEvent) {
        if let Some(observer) = &self.options.observer {
            observer(&event);
        }
        self.events.push(event);
    }

    /// Marks the conversation aborted. No-op when it already ended.
    pub fn abort(&mut self, reason: AbortReason) -> StepResult {
        if self.status == ConversationStatus::Active {
            self.status = ConversationStatus::Aborted;
            self.emit(TranscriptEvent::Aborted {
                reason: reason.clone(),
            });
        }
        StepResult::Aborted(reason)
    }

    fn request(&self) -> BackendRequest {
        BackendRequest {
            model: self.options.model.clone(),
            messages: self.messages.clone(),
            functions: self.descriptors.clone(),
            temperature: self.options.temperature,
        }
    }

    /// Sends the conversation unless that would exceed the budget; `None`
    /// means the conversation was aborted instead.
    async fn query(&mut self, backend: &dyn Backend) -> Result<Option<BackendResponse>, BackendError> {
        if self.token_estimate > self.budget {
            self.abort(AbortReason::TokenBudget);
            return Ok(None);
        }
        backend.complete(&self.request()).await.map(Some)
    }

    /// One backend round-trip, plus any error-forwarding retries it triggers.
    pub async fn step(&mut self, backend: &dyn Backend, engine: &Engine) -> Result<StepResult, ConversationError> {
        if self.status != ConversationStatus::Active {
            return Err(ConversationError::NotActive);
        }
        if self.dispatch_count >= self.options.max_dispatches {
            return Ok(self.abort(AbortReason::DispatchLimit));
        }
        match self.query(backend).await? {
            Some(response) => self.handle(response, backend, engine).await,
            None => Ok(StepResult::Aborted(AbortReason::TokenBudget)),
        }
    }

    /// Reports a failed call to the backend and processes its next answer.
    pub async fn forward_error(
        &mut self,
        call: FunctionCall,
        error: &str,
        backend: &dyn Backend,
        engine: &Engine,
    ) -> Result<StepResult, ConversationError> {
        if self.status != ConversationStatus::Active {
            return Err(ConversationError::NotActive);
        }
        self.consecutive_failures += 1;
        if self.consecutive_failures >= self.options.retry_bound {
            return Ok(self.abort(AbortReason::UnrecoverableDispatch));
        }
        match self.forward_and_query(call, error, backend).await? {
            Some(response) => self.handle(response, backend, engine).await,
            None => Ok(StepResult::Aborted(AbortReason::TokenBudget)),
        }
    }

    async fn forward_and_query(
        &mut self,
        call: FunctionCall,
        error: &str,
        backend: &dyn Backend,
    ) -> Result<Option<BackendResponse>, BackendError> {
        self.emit(TranscriptEvent::ErrorForwarded {
            function: Some(call.name.clone()),
            arguments: Some(call.arguments.clone()),
            error: error.to_string(),
        });
        let content = format!("Error calling {}: {error}", call.name);
        self.push_message(Message::assistant_call(call));
        self.push_message(Message::user(content));
        self.query(backend).await
    }

    async fn handle(
        &mut self,
        mut response: BackendResponse,
        backend: &dyn Backend,
        engine: &Engine,
    ) -> Result<StepResult, ConversationError> {
        loop {
            let call = match response {
                BackendResponse::Final { content } => {
                    self.status = ConversationStatus::Done;
                    self.emit(TranscriptEvent::Done {
                        content: content.clone(),
                    });
                    return Ok(StepResult::Finished { content });
                }
                BackendResponse::FunctionCall(call) => call,
            };
            match dispatch(engine, &self.descriptors, &call) {
                Ok((arguments, future_id, state)) => {
                    let function = call.name.clone();
                    self.push_message(Message::assistant_call(call));
                    self.push_message(Message::user(format!(
                        "Task scheduled with AppFuture id: {future_id}"
                    )));
                    self.dispatch_count += 1;
                    self.consecutive_failures = 0;
                    self.emit(TranscriptEvent::Dispatch {
                        function: function.clone(),
                        arguments,
                        future_id: future_id.clone(),
                        state,
                    });
                    return Ok(StepResult::Dispatched { function, future_id });
                }
                Err(err) => {
                    tracing::debug!(function = %call.name, %err, "dispatch failed");
                    self.consecutive_failures += 1;
                    if self.consecutive_failures >= self.options.retry_bound {
                        return Ok(self.abort(AbortReason::UnrecoverableDispatch));
                    }
                    match self.forward_and_query(call, &err.to_string(), backend).await? {
                        Some(next) => response = next,
                        None => return Ok(StepResult::Aborted(AbortReason::TokenBudget)),
                    }
                }
            }
        }
    }
}

/// Runs the loop until the stop flag or an abort. Backend failures end the
/// conversation with an `aborted` event rather than an error.
pub async fn run_instruction(
    preamble: &str,
    instruction: &str,
    engine: &Engine,
    backend: &dyn Backend,
    budget: u64,
    options: ConversationOptions,
) -> Result<Transcript, ConversationError> {
    if engine.registry().is_empty() {
        return Err(ConversationError::EmptyRegistry);
    }
    let descriptors = engine.registry().descriptors();
    let mut state = ConversationState::new(preamble, instruction, budget, descriptors, options)?;
    drive(&mut state, engine, backend).await;
    Ok(state.into_transcript())
}

/// Steps `state` until it is no longer active.
pub async fn drive(state: &mut ConversationState, engine: &Engine, backend: &dyn Backend) {
    while state.status() == ConversationStatus::Active {
        match state.step(backend, engine).await {
            Ok(_) => {}
            Err(ConversationError::Backend(err)) => {
                state.abort(AbortReason::Backend(err.to_string()));
            }
            Err(err) => {
                state.abort(AbortReason::Backend(err.to_string()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_examples() {
        assert_eq!(estimate_tokens(&[], &[]), 0);
        assert_eq!(estimate_tokens(&[Message::user("12345678")], &[]), 6);
        assert_eq!(estimate_tokens(&[Message::user("123456789")], &[]), 7);
        assert_eq!(estimate_tokens(&[Message::user("")], &[]), 4);
    }

    #[test]
    fn function_call_characters_count() {
        let call = Message::assistant_call(FunctionCall {
            name: "abcd".into(),
            arguments: "{}".into(),
        });
        assert_eq!(estimate_tokens(&[call], &[]), 2 + 4);
    }

    #[test]
    fn zero_budget_rejected() {
        assert!(matches!(
            ConversationState::new("", "x", 0, vec![], ConversationOptions::default()),
            Err(ConversationError::InvalidBudget)
        ));
    }

    #[test]
    fn new_conversation_shape() {
        let state = ConversationState::new("", "x", 1, vec![], ConversationOptions::default()).unwrap();
        assert_eq!(state.messages().len(), 2);
        assert_eq!(state.messages()[0].role, Role::System);
        assert_eq!(state.messages()[1].role, Role::User);
        assert_eq!(state.status(), ConversationStatus::Active);
        assert_eq!(state.dispatch_count(), 0);
        // "" -> 0 + 4, "x" -> 1 + 4
        assert_eq!(state.token_estimate(), 9);
    }
}
