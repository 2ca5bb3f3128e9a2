//! Planner, executor and debugger agents.
//!
//! The planner turns a description into a [`Plan`], the executor runs it on
//! the engine and checks each step's outcome, and the debugger proposes a
//! [`Remediation`] for failed steps or escalates to a human.

mod debugger;
mod escalation;
mod executor;
mod outcome;
mod plan;
mod planner;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use debugger::{debug_request, debug_step, Remediation, DEBUG_PREFIX, STDERR_TAIL_LINES};
pub use escalation::{escalation_channel, EscalationChannel, EscalationReceiver, HumanDecision, PendingEscalation};
pub use executor::{
    execute_plan, DecidedBy, ExecutorOptions, HostCapacity, PlanReport, PlanStatus, ReportEntry, ReportObserver,
    StepDriver,
};
pub use outcome::{check_outcome, tail_file, CheckResult, StepOutcome, Verdict};
pub use plan::{parse_step_specs, Plan, PlanError, PlanStep, ResourceConstraints, StepBinding, StepSpec};
pub use planner::{make_plan, make_plan_default, planner_prompt, Planning, INVALID_PLAN_PREFIX};

use crate::backend::Backend;
use crate::conversation::DEFAULT_RETRY_BOUND;
use crate::engine::Engine;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedRun {
    pub planning: Planning,
    pub report: PlanReport,
}

/// Plans `description` and executes the result.
pub async fn run_planned(
    description: &str,
    engine: &Engine,
    backend: Arc<dyn Backend>,
    channel: &EscalationChannel,
    options: ExecutorOptions,
    observer: Option<ReportObserver>,
) -> Result<PlannedRun, PlanError> {
    let planning = make_plan(description, engine.registry(), backend.as_ref(), DEFAULT_RETRY_BOUND).await?;
    let report = execute_plan(planning.plan.clone(), engine, backend, channel, options, observer).await;
    Ok(PlannedRun { planning, report })
}
