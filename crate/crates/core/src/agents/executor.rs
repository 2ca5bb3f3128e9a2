//! Runs a plan step by step on the engine.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use tokio::task::JoinSet;

use super::debugger::{debug_step, Remediation};
use super::escalation::{EscalationChannel, HumanDecision};
use super::outcome::{check_outcome, StepOutcome};
use super::plan::{Plan, PlanStep, StepBinding, StepSpec};
use crate::backend::Backend;
use crate::conversation::{drive, ConversationOptions, ConversationState};
use crate::engine::{Engine, FutureId};
use crate::registry::{BoundArguments, CallVariant};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostCapacity {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_bytes: Option<u64>,
    /// Server classes this host provides. Empty means any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub server_classes: Vec<String>,
}

impl HostCapacity {
    /// Reason the step cannot run on this host, if any.
    pub fn violation(&self, step: &PlanStep) -> Option<String> {
        let c = &step.constraints;
        let over = |what: &str, need: Option<u64>, have: Option<u64>| match (need, have) {
            (Some(need), Some(have)) if need > have => {
                Some(format!("{what} {need} exceeds host capacity {have}"))
            }
            _ => None,
        };
        over("max_memory", c.max_memory, self.memory_bytes)
            .or_else(|| over("max_storage", c.max_storage, self.storage_bytes))
            .or_else(|| match &c.server_class {
                Some(class) if !self.server_classes.is_empty() && !self.server_classes.contains(class) => {
                    Some(format!("server class `{class}` is not available on this host"))
                }
                _ => None,
            })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepDriver {
    /// Each step runs in its own fresh function-calling conversation.
    #[default]
    Conversation,
    /// Steps are scheduled on the engine directly.
    Direct,
}

#[derive(Debug, Clone)]
pub struct ExecutorOptions {
    pub capacity: HostCapacity,
    pub driver: StepDriver,
    /// Token budget of each per-step conversation.
    pub step_budget: u64,
    pub step_timeout: Duration,
    /// Debugger consultations per step before escalation is forced.
    pub debugger_attempts: u32,
}

impl Default for ExecutorOptions {
    fn default() -> Self {
        Self {
            capacity: HostCapacity::default(),
            driver: StepDriver::default(),
            step_budget: 4096,
            step_timeout: Duration::from_secs(600),
            debugger_attempts: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    Debugger,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum ReportEntry {
    Dispatched {
        step: usize,
        task: String,
        future_id: FutureId,
        attempt: u32,
    },
    Outcome(StepOutcome),
    EscalationRaised {
        step: usize,
        escalation_id: String,
        question: String,
    },
    EscalationAnswered {
        step: usize,
        escalation_id: String,
        decision: HumanDecision,
    },
    Remediation {
        step: usize,
        remediation: Remediation,
        decided_by: DecidedBy,
    },
    PlanModified {
        plan: Plan,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PlanStatus {
    Completed,
    Aborted { reason: String, causes: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanReport {
    pub description: String,
    /// The plan as finally executed, including modifications.
    pub plan: Plan,
    pub entries: Vec<ReportEntry>,
    pub status: PlanStatus,
}

impl PlanReport {
    pub fn outcomes(&self) -> impl Iterator<Item = &StepOutcome> {
        self.entries.iter().filter_map(|e| match e {
            ReportEntry::Outcome(o) => Some(o),
            _ => None,
        })
    }

    pub fn remediations(&self) -> impl Iterator<Item = (&Remediation, DecidedBy)> {
        self.entries.iter().filter_map(|e| match e {
            ReportEntry::Remediation {
                remediation, decided_by, ..
            } => Some((remediation, *decided_by)),
            _ => None,
        })
    }

    /// Step numbers in the order their futures were dispatched.
    pub fn dispatch_order(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                ReportEntry::Dispatched { step, .. } => Some(*step),
                _ => None,
            })
            .collect()
    }

    /// Compact per-step history such as `["failed", "retry_step", "ok"]`.
    pub fn step_history(&self, step: usize) -> Vec<String> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                ReportEntry::Outcome(o) if o.step_index == step => Some(
                    if o.is_ok() { "ok" } else { "failed" }.to_string(),
                ),
                ReportEntry::Remediation {
                    step: s, remediation, ..
                } if *s == step => Some(remediation.kind().to_string()),
                _ => None,
            })
            .collect()
    }

    pub fn is_completed(&self) -> bool {
        self.status == PlanStatus::Completed
    }
}

pub type ReportObserver = Arc<dyn Fn(&ReportEntry) + Send + Sync>;

struct Recorder {
    entries: Mutex<Vec<ReportEntry>>,
    observer: Option<ReportObserver>,
}

impl Recorder {
    fn push(&self, entry: ReportEntry) {
        let mut entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(observer) = &self.observer {
            observer(&entry);
        }
        entries.push(entry);
    }

    fn take(&self) -> Vec<ReportEntry> {
        std::mem::take(&mut *self.entries.lock().unwrap_or_else(|e| e.into_inner()))
    }
}

struct StepContext {
    engine: Engine,
    backend: Arc<dyn Backend>,
    options: ExecutorOptions,
    summary: String,
    recorder: Arc<Recorder>,
}

fn bound_arguments(step: &PlanStep, upstream: &IndexMap<String, FutureId>) -> BoundArguments {
    match &step.binding {
        StepBinding::Files(files) => files.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        StepBinding::After(_) => upstream.iter().map(|(k, v)| (k.clone(), v.to_string())).collect(),
    }
}

/// Dispatches one step and waits for its outcome.
async fn run_step(
    ctx: Arc<StepContext>,
    step: PlanStep,
    upstream: IndexMap<String, FutureId>,
    attempt: u32,
) -> StepOutcome {
    if let Some(violation) = ctx.options.capacity.violation(&step) {
        return StepOutcome::not_launched(&step, None, format!("constraint violated: {violation}"));
    }
    let registry = ctx.engine.registry().clone();
    let Some(task) = registry.task(&step.task) else {
        return StepOutcome::not_launched(&step, None, format!("unknown task `{}`", step.task));
    };
    let arguments = bound_arguments(&step, &upstream);
    let variant = match step.binding {
        StepBinding::Files(_) => CallVariant::FromFiles,
        StepBinding::After(_) => CallVariant::FromFutures,
    };

    let mut conversation = None;
    let dispatched = match ctx.options.driver {
        StepDriver::Direct => match variant {
            CallVariant::FromFiles => ctx.engine.schedule_from_files(&step.task, &arguments),
            CallVariant::FromFutures => ctx.engine.schedule_from_futures(&step.task, &arguments),
        }
        .map_err(|e| e.to_string()),
        StepDriver::Conversation => {
            let function = variant.function_name(&step.task);
            let json = serde_json::to_string(&arguments).expect("arguments serialize");
            let preamble = format!("{} You are executing step {}.", ctx.summary, step.index);
            let instruction = format!("Call {function} with arguments {json}");
            let descriptors = registry
                .descriptor_pair(&step.task)
                .map(|p| p.to_vec())
                .unwrap_or_default();
            match ConversationState::new(
                &preamble,
                &instruction,
                ctx.options.step_budget,
                descriptors,
                ConversationOptions::default(),
            ) {
                Ok(mut state) => {
                    drive(&mut state, &ctx.engine, ctx.backend.as_ref()).await;
                    let transcript = state.into_transcript();
                    let result = match transcript.dispatches().first() {
                        Some((_, id)) => Ok((*id).clone()),
                        None => Err(match transcript.abort_reason() {
                            Some(reason) => format!("step conversation aborted: {reason}"),
                            None => "step conversation ended without a dispatch".to_string(),
                        }),
                    };
                    conversation = Some(transcript);
                    result
                }
                Err(err) => Err(err.to_string()),
            }
        }
    };
    let future_id = match dispatched {
        Ok(id) => id,
        Err(error) => {
            let mut outcome = StepOutcome::not_launched(&step, None, error);
            outcome.conversation = conversation;
            return outcome;
        }
    };
    ctx.recorder.push(ReportEntry::Dispatched {
        step: step.index,
        task: step.task.clone(),
        future_id: future_id.clone(),
        attempt,
    });
    let mut outcome = match ctx.engine.await_completion(&future_id, ctx.options.step_timeout).await {
        Ok(record) => check_outcome(&step, task, &record),
        Err(err) => StepOutcome::not_launched(&step, None, err.to_string()),
    };
    outcome.future_id = Some(future_id);
    outcome.conversation = conversation;
    outcome
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SlotState {
    Waiting,
    Running,
    Ok(FutureId),
    Failed,
}

struct Slot {
    state: SlotState,
    generation: u64,
    attempts: u32,
    debugger_calls: u32,
}

impl Slot {
    fn new(generation: u64) -> Self {
        Self {
            state: SlotState::Waiting,
            generation,
            attempts: 0,
            debugger_calls: 0,
        }
    }
}

struct Executor<'a> {
    ctx: Arc<StepContext>,
    channel: &'a EscalationChannel,
    plan: Plan,
    slots: Vec<Slot>,
    next_generation: u64,
    escalations: u32,
    running: JoinSet<(usize, u64, StepOutcome)>,
}

impl Executor<'_> {
    fn fresh_generation(&mut self) -> u64 {
        self.next_generation += 1;
        self.next_generation
    }

    fn launch_ready(&mut self) {
        for step in &self.plan.steps {
            let slot = &self.slots[step.index - 1];
            if slot.state != SlotState::Waiting {
                continue;
            }
            let mut upstream = IndexMap::new();
            let ready = match &step.binding {
                StepBinding::Files(_) => true,
                StepBinding::After(refs) => refs.iter().all(|(name, &target)| {
                    match &self.slots[target - 1].state {
                        SlotState::Ok(id) => {
                            upstream.insert(name.clone(), id.clone());
                            true
                        }
                        _ => false,
                    }
                }),
            };
            if !ready {
                continue;
            }
            let slot = &mut self.slots[step.index - 1];
            slot.state = SlotState::Running;
            slot.attempts += 1;
            let (generation, attempt) = (slot.generation, slot.attempts);
            let ctx = self.ctx.clone();
            let step = step.clone();
            self.running.spawn(async move {
                let index = step.index;
                (index, generation, run_step(ctx, step, upstream, attempt).await)
            });
        }
    }

    async fn decide(&mut self, step: &PlanStep, outcome: &StepOutcome) -> (Remediation, DecidedBy) {
        let slot = &mut self.slots[step.index - 1];
        let proposal = if slot.debugger_calls < self.ctx.options.debugger_attempts {
            slot.debugger_calls += 1;
            debug_step(
                &self.plan,
                step,
                outcome,
                self.ctx.engine.registry(),
                self.ctx.backend.as_ref(),
            )
            .await
        } else {
            Remediation::Escalate {
                question: format!(
                    "{step} failed again ({}) after {} debugger attempts. \
                     Retry the step, provide new input files, or abort?",
                    outcome.failure_summary(),
                    slot.debugger_calls
                ),
            }
        };
        let Remediation::Escalate { question } = proposal else {
            return (proposal, DecidedBy::Debugger);
        };
        self.escalations += 1;
        let escalation_id = format!("esc-{}", self.escalations);
        self.ctx.recorder.push(ReportEntry::EscalationRaised {
            step: step.index,
            escalation_id: escalation_id.clone(),
            question: question.clone(),
        });
        let decision = self
            .channel
            .escalate(&escalation_id, step.index, &step.task, &question)
            .await;
        self.ctx.recorder.push(ReportEntry::EscalationAnswered {
            step: step.index,
            escalation_id,
            decision: decision.clone(),
        });
        let remediation = match decision {
            HumanDecision::ApproveRetry => Remediation::RetryStep { binding: None },
            HumanDecision::ProvideBinding { values } => Remediation::RetryStep { binding: Some(values) },
            HumanDecision::Abort { reason } => Remediation::Abort {
                reason: reason.unwrap_or_else(|| "aborted by operator".into()),
            },
        };
        (remediation, DecidedBy::Human)
    }

    /// Applies a remediation. Returns the abort reason when the plan stops.
    fn apply(&mut self, step: &PlanStep, remediation: &Remediation) -> Result<(), String> {
        let index = step.index;
        match remediation {
            Remediation::RetryStep { binding: None } => {
                self.slots[index - 1].state = SlotState::Waiting;
                Ok(())
            }
            Remediation::RetryStep { binding: Some(files) } => {
                let mut specs = vec![StepSpec {
                    task: step.task.clone(),
                    files: Some(files.clone()),
                    after: None,
                    expected_outcome: Some(step.expected_outcome.clone()),
                    constraints: Some(step.constraints.clone()),
                }];
                specs.extend(self.plan.to_specs().into_iter().skip(index));
                let plan = self
                    .plan
                    .with_replacement(index, specs, self.ctx.engine.registry())
                    .map_err(|e| format!("invalid binding: {e}"))?;
                self.plan = plan;
                self.slots[index - 1].state = SlotState::Waiting;
                self.ctx.recorder.push(ReportEntry::PlanModified {
                    plan: self.plan.clone(),
                });
                Ok(())
            }
            Remediation::ModifyPlan { steps } => {
                let plan = self
                    .plan
                    .with_replacement(index, steps.clone(), self.ctx.engine.registry())
                    .map_err(|e| format!("invalid plan change: {e}"))?;
                self.slots.truncate(index - 1);
                for _ in index..=plan.len() {
                    let generation = self.fresh_generation();
                    self.slots.push(Slot::new(generation));
                }
                self.plan = plan;
                self.ctx.recorder.push(ReportEntry::PlanModified {
                    plan: self.plan.clone(),
                });
                Ok(())
            }
            Remediation::Abort { reason } => Err(reason.clone()),
            Remediation::Escalate { .. } => Err("unresolved escalation".into()),
        }
    }

    async fn run(&mut self) -> PlanStatus {
        loop {
            self.launch_ready();
            let Some(joined) = self.running.join_next().await else {
                if self.slots.iter().all(|s| matches!(s.state, SlotState::Ok(_))) {
                    return PlanStatus::Completed;
                }
                return PlanStatus::Aborted {
                    reason: "no runnable steps left".into(),
                    causes: Vec::new(),
                };
            };
            let (index, generation, outcome) = match joined {
                Ok(result) => result,
                Err(err) => {
                    return PlanStatus::Aborted {
                        reason: format!("step task failed: {err}"),
                        causes: Vec::new(),
                    }
                }
            };
            if self.slots.get(index - 1).is_none_or(|s| s.generation != generation) {
                tracing::debug!(step = index, "ignoring outcome of a replaced step");
                continue;
            }
            self.ctx.recorder.push(ReportEntry::Outcome(outcome.clone()));
            if outcome.is_ok() {
                let id = outcome.future_id.clone().expect("ok outcomes have a future");
                self.slots[index - 1].state = SlotState::Ok(id);
                continue;
            }
            self.slots[index - 1].state = SlotState::Failed;
            let step = self.plan.step(index).expect("slot exists").clone();
            let (remediation, decided_by) = self.decide(&step, &outcome).await;
            self.ctx.recorder.push(ReportEntry::Remediation {
                step: index,
                remediation: remediation.clone(),
                decided_by,
            });
            if let Err(reason) = self.apply(&step, &remediation) {
                self.running.abort_all();
                let who = match decided_by {
                    DecidedBy::Debugger => "debugger",
                    DecidedBy::Human => "operator",
                };
                return PlanStatus::Aborted {
                    causes: vec![
                        format!("{step} failed: {}", outcome.failure_summary()),
                        format!("{who} chose {}: {reason}", remediation.kind()),
                    ],
                    reason,
                };
            }
        }
    }
}

/// Executes `plan`, consulting the debugger on failures and escalating to a
/// human through `channel` when it cannot help.
pub async fn execute_plan(
    plan: Plan,
    engine: &Engine,
    backend: Arc<dyn Backend>,
    channel: &EscalationChannel,
    options: ExecutorOptions,
    observer: Option<ReportObserver>,
) -> PlanReport {
    let recorder = Arc::new(Recorder {
        entries: Mutex::new(Vec::new()),
        observer,
    });
    let ctx = Arc::new(StepContext {
        engine: engine.clone(),
        backend,
        options,
        summary: plan.summary(),
        recorder: recorder.clone(),
    });
    let slots = (1..=plan.len() as u64).map(Slot::new).collect();
    let mut executor = Executor {
        ctx,
        channel,
        next_generation: plan.len() as u64,
        plan,
        slots,
        escalations: 0,
        running: JoinSet::new(),
    };
    let status = executor.run().await;
    PlanReport {
        description: executor.plan.source_description.clone(),
        plan: executor.plan,
        entries: recorder.take(),
        status,
    }
}
