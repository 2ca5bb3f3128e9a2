//! Turns a natural-language description into a validated [`Plan`].

use serde::{Deserialize, Serialize};

use super::plan::{Plan, PlanError};
use crate::backend::{Backend, BackendRequest, BackendResponse};
use crate::conversation::{Message, DEFAULT_RETRY_BOUND};
use crate::registry::Registry;

/// Prefix of the user message that reports a rejected plan.
pub const INVALID_PLAN_PREFIX: &str = "Invalid plan: ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planning {
    pub plan: Plan,
    pub messages: Vec<Message>,
    /// Validation errors forwarded to the backend, in order.
    pub forwarded_errors: Vec<String>,
}

/// System prompt listing the plan format and the available tasks.
pub fn planner_prompt(registry: &Registry) -> String {
    let mut prompt = String::from(
        "You are a workflow planner. Reply with a JSON object {\"steps\": [...]} and nothing else.\n\
         Steps are numbered from 1. Each step names a task and binds either its file parameters\n\
         (\"files\": {param: path}) or its upstream slots to earlier step numbers (\"after\": {slot: n}).\n\
         Optional per-step fields: \"expected_outcome\" and \"constraints\".\n\nAvailable tasks:\n",
    );
    for task in registry.tasks() {
        let params: Vec<&str> = task.file_params.iter().map(|p| p.name.as_str()).collect();
        prompt.push_str(&format!("- {}: {} files=[{}]", task.name, task.description, params.join(", ")));
        let slots: Vec<String> = task
            .upstream_slots
            .iter()
            .map(|s| format!("{} <- {}", s.name, s.task))
            .collect();
        if !slots.is_empty() {
            prompt.push_str(&format!(" after=[{}]", slots.join(", ")));
        }
        prompt.push('\n');
    }
    prompt
}

/// Asks `backend` for a plan, forwarding validation errors until a valid
/// plan arrives or `retry_bound` proposals were rejected.
pub async fn make_plan(
    description: &str,
    registry: &Registry,
    backend: &dyn Backend,
    retry_bound: u32,
) -> Result<Planning, PlanError> {
    if registry.is_empty() {
        return Err(PlanError::EmptyRegistry);
    }
    let retry_bound = retry_bound.max(1);
    let mut messages = vec![Message::system(planner_prompt(registry)), Message::user(description)];
    let mut forwarded_errors = Vec::new();
    for attempt in 1..=retry_bound {
        let response = backend
            .complete(&BackendRequest::new(messages.clone(), Vec::new()))
            .await?;
        let (reply, result) = match response {
            BackendResponse::Final { content } => {
                let result = Plan::parse(description, &content, registry);
                (Message::assistant(content), result)
            }
            BackendResponse::FunctionCall(call) => {
                let name = call.name.clone();
                (
                    Message::assistant_call(call),
                    Err(PlanError::Parse(format!("expected a plan object, got a call to `{name}`"))),
                )
            }
        };
        messages.push(reply);
        match result {
            Ok(plan) => {
                return Ok(Planning {
                    plan,
                    messages,
                    forwarded_errors,
                })
            }
            Err(err) if attempt == retry_bound => {
                return Err(PlanError::Unplannable {
                    attempts: attempt,
                    last_error: err.to_string(),
                })
            }
            Err(err) => {
                tracing::debug!(%err, attempt, "forwarding plan error");
                messages.push(Message::user(format!("{INVALID_PLAN_PREFIX}{err}")));
                forwarded_errors.push(err.to_string());
            }
        }
    }
    unreachable!("loop returns on its last attempt")
}

/// [`make_plan`] with the default retry bound.
pub async fn make_plan_default(
    description: &str,
    registry: &Registry,
    backend: &dyn Backend,
) -> Result<Planning, PlanError> {
    make_plan(description, registry, backend, DEFAULT_RETRY_BOUND).await
}
