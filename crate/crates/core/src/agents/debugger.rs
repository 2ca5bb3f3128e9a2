//! Diagnoses failed steps and proposes a remediation.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::outcome::{tail_file, StepOutcome};
use super::plan::{strip_fence, Plan, PlanStep, StepBinding, StepSpec};
use crate::backend::{Backend, BackendRequest, BackendResponse};
use crate::conversation::Message;
use crate::registry::Registry;

/// Lines of stderr included in a debugger request.
pub const STDERR_TAIL_LINES: usize = 20;

/// Prefix of every debugger request.
pub const DEBUG_PREFIX: &str = "Diagnose failed step";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Remediation {
    RetryStep {
        /// Replacement file bindings, if the retry should use new inputs.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        binding: Option<IndexMap<String, String>>,
    },
    /// Replaces the failed step and every later step.
    ModifyPlan { steps: Vec<StepSpec> },
    Escalate { question: String },
    Abort { reason: String },
}

impl Remediation {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::RetryStep { .. } => "retry_step",
            Self::ModifyPlan { .. } => "modify_plan",
            Self::Escalate { .. } => "escalate",
            Self::Abort { .. } => "abort",
        }
    }
}

/// The request text sent to the debugger backend.
pub fn debug_request(step: &PlanStep, outcome: &StepOutcome) -> String {
    let binding = match &step.binding {
        StepBinding::Files(files) => format!("files {}", serde_json::to_string(files).unwrap_or_default()),
        StepBinding::After(refs) => format!("after {}", serde_json::to_string(refs).unwrap_or_default()),
    };
    let predicates: Vec<String> = step.expected_outcome.iter().map(|p| p.to_string()).collect();
    let checks: Vec<String> = outcome
        .checks
        .iter()
        .map(|c| format!("{}={}", c.predicate, if c.passed { "pass" } else { "fail" }))
        .collect();
    let stderr = outcome
        .record
        .as_ref()
        .map(|r| tail_file(&r.stderr_path, STDERR_TAIL_LINES))
        .unwrap_or_default();
    format!(
        "{DEBUG_PREFIX} {index} (task {task}).\n\
         Binding: {binding}\n\
         Expected outcome: {predicates}\n\
         Checks: {checks}\n\
         Failure: {failure}\n\
         Stderr tail:\n{stderr}\n\n\
         Reply with one JSON object: {{\"action\": \"retry_step\"}}, \
         {{\"action\": \"modify_plan\", \"steps\": [...]}} replacing this step and the ones after it, \
         {{\"action\": \"escalate\", \"question\": \"...\"}} or {{\"action\": \"abort\", \"reason\": \"...\"}}.",
        index = step.index,
        task = step.task,
        predicates = predicates.join(", "),
        checks = checks.join(", "),
        failure = outcome.failure_summary(),
    )
}

fn fallback_question(step: &PlanStep, outcome: &StepOutcome, problem: &str) -> Remediation {
    Remediation::Escalate {
        question: format!(
            "{step} failed ({}). The debugger could not propose a usable fix: {problem}. \
             Retry the step, provide new input files, or abort?",
            outcome.failure_summary()
        ),
    }
}

/// Asks `backend` how to handle the failed `step`. Anything other than a
/// well-formed, valid proposal becomes an escalation.
pub async fn debug_step(
    plan: &Plan,
    step: &PlanStep,
    outcome: &StepOutcome,
    registry: &Registry,
    backend: &dyn Backend,
) -> Remediation {
    let messages = vec![
        Message::system("You are the debugger of a workflow execution engine."),
        Message::user(debug_request(step, outcome)),
    ];
    let content = match backend.complete(&BackendRequest::new(messages, Vec::new())).await {
        Ok(BackendResponse::Final { content }) => content,
        Ok(BackendResponse::FunctionCall(call)) => {
            return fallback_question(step, outcome, &format!("unexpected call to `{}`", call.name))
        }
        Err(err) => return fallback_question(step, outcome, &err.to_string()),
    };
    let proposal: Remediation = match serde_json::from_str(strip_fence(&content)) {
        Ok(proposal) => proposal,
        Err(err) => return fallback_question(step, outcome, &format!("unparseable proposal ({err})")),
    };
    match &proposal {
        Remediation::ModifyPlan { steps } => match plan.with_replacement(step.index, steps.clone(), registry) {
            Ok(_) => proposal,
            Err(err) => fallback_question(step, outcome, &format!("invalid plan change ({err})")),
        },
        Remediation::RetryStep { binding: Some(files) } => {
            let spec = StepSpec {
                task: step.task.clone(),
                files: Some(files.clone()),
                after: None,
                expected_outcome: Some(step.expected_outcome.clone()),
                constraints: Some(step.constraints.clone()),
            };
            let mut specs = vec![spec];
            specs.extend(plan.to_specs().into_iter().skip(step.index));
            match plan.with_replacement(step.index, specs, registry) {
                Ok(_) => proposal,
                Err(err) => fallback_question(step, outcome, &format!("invalid binding ({err})")),
            }
        }
        _ => proposal,
    }
}
