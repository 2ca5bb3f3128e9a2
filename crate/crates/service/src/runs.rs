//! Run records, per-run event logs and escalation bookkeeping.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use fcflow_core::agents::{HumanDecision, PendingEscalation, Plan, PlanReport, Planning, ReportEntry};
use fcflow_core::engine::{Engine, FutureTransition};
use fcflow_core::{Transcript, TranscriptEvent};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    DirectLoop,
    Planned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
    Aborted,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        self != Self::Running
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub instruction: String,
    pub mode: RunMode,
    pub manifest: String,
    pub status: RunStatus,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<Transcript>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planning: Option<Planning>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_report: Option<PlanReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub instruction: String,
    pub mode: RunMode,
    pub manifest: String,
    pub status: RunStatus,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
}

impl From<&RunRecord> for RunSummary {
    fn from(r: &RunRecord) -> Self {
        Self {
            run_id: r.run_id.clone(),
            instruction: r.instruction.clone(),
            mode: r.mode,
            manifest: r.manifest.clone(),
            status: r.status,
            created_at: r.created_at,
            finished_at: r.finished_at,
        }
    }
}

/// Payload of one streamed event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunEvent {
    RunStarted {
        run_id: String,
        instruction: String,
        mode: RunMode,
        manifest: String,
    },
    Transcript(TranscriptEvent),
    Future(FutureTransition),
    PlanReady {
        plan: Plan,
    },
    Plan(ReportEntry),
    EscalationPending {
        escalation_id: String,
        step: usize,
        task: String,
        question: String,
    },
    RunFinished {
        status: RunStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

impl RunEvent {
    pub fn name(&self) -> &'static str {
        match self {
            Self::RunStarted { .. } => "run_started",
            Self::Transcript(_) => "transcript",
            Self::Future(_) => "future",
            Self::PlanReady { .. } => "plan_ready",
            Self::Plan(_) => "plan",
            Self::EscalationPending { .. } => "escalation_pending",
            Self::RunFinished { .. } => "run_finished",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencedEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: RunEvent,
}

struct EventLog {
    events: Vec<SequencedEvent>,
    subscribers: Vec<mpsc::UnboundedSender<SequencedEvent>>,
    closed: bool,
    file: Option<File>,
}

enum EscalationSlot {
    Pending(PendingEscalation),
    Answered,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnswerError {
    #[error("no escalation `{0}` is pending")]
    NotPending(String),
    #[error("escalation `{0}` was already answered")]
    AlreadyAnswered(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscalationView {
    pub escalation_id: String,
    pub step: usize,
    pub task: String,
    pub question: String,
}

/// Shared state of one run.
pub struct RunHandle {
    dir: PathBuf,
    record: Mutex<RunRecord>,
    log: Mutex<EventLog>,
    escalations: Mutex<HashMap<String, EscalationSlot>>,
    engine: Mutex<Option<Engine>>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl RunHandle {
    /// Creates the run directory and its `events.jsonl` and `record.json`.
    pub fn create(runs_root: &Path, record: RunRecord) -> std::io::Result<Self> {
        let dir = runs_root.join(&record.run_id);
        std::fs::create_dir_all(&dir)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("events.jsonl"))?;
        let handle = Self {
            dir,
            record: Mutex::new(record),
            log: Mutex::new(EventLog {
                events: Vec::new(),
                subscribers: Vec::new(),
                closed: false,
                file: Some(file),
            }),
            escalations: Mutex::new(HashMap::new()),
            engine: Mutex::new(None),
        };
        handle.persist_record();
        Ok(handle)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record(&self) -> RunRecord {
        lock(&self.record).clone()
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary::from(&*lock(&self.record))
    }

    pub fn set_engine(&self, engine: Engine) {
        *lock(&self.engine) = Some(engine);
    }

    pub fn engine(&self) -> Option<Engine> {
        lock(&self.engine).clone()
    }

    fn persist_record(&self) {
        let record = lock(&self.record);
        let json = serde_json::to_string_pretty(&*record).expect("records serialize");
        if let Err(err) = std::fs::write(self.dir.join("record.json"), json) {
            tracing::warn!(run_id = %record.run_id, %err, "cannot persist run record");
        }
    }

    /// Appends an event, persists it and fans it out to subscribers.
    pub fn push(&self, event: RunEvent) {
        let mut log = lock(&self.log);
        if log.closed {
            return;
        }
        let sequenced = SequencedEvent {
            seq: log.events.len() as u64,
            event,
        };
        if let Some(file) = log.file.as_mut() {
            let line = serde_json::to_string(&sequenced).expect("events serialize");
            if let Err(err) = writeln!(file, "{line}") {
                tracing::warn!(%err, "cannot append event");
            }
        }
        log.subscribers.retain(|tx| tx.send(sequenced.clone()).is_ok());
        log.events.push(sequenced);
    }

    /// Every event so far plus a receiver for the ones that follow. The
    /// receiver ends once the run has finished.
    pub fn subscribe(&self) -> (Vec<SequencedEvent>, Option<mpsc::UnboundedReceiver<SequencedEvent>>) {
        let mut log = lock(&self.log);
        let replay = log.events.clone();
        if log.closed {
            return (replay, None);
        }
        let (tx, rx) = mpsc::unbounded_channel();
        log.subscribers.push(tx);
        (replay, Some(rx))
    }

    pub fn events(&self) -> Vec<SequencedEvent> {
        lock(&self.log).events.clone()
    }

    /// Stores the terminal state, emits `run_finished` and closes the stream.
    /// Later calls are ignored, so a terminal record never changes.
    pub fn finish(&self, update: impl FnOnce(&mut RunRecord)) {
        let (status, error) = {
            let mut record = lock(&self.record);
            if record.status.is_terminal() {
                return;
            }
            update(&mut record);
            if !record.status.is_terminal() {
                record.status = RunStatus::Failed;
            }
            record.finished_at = Some(Utc::now());
            (record.status, record.error.clone())
        };
        self.persist_record();
        self.push(RunEvent::RunFinished { status, error });
        let mut log = lock(&self.log);
        log.closed = true;
        log.subscribers.clear();
        log.file = None;
    }

    pub fn add_escalation(&self, pending: PendingEscalation) {
        let event = RunEvent::EscalationPending {
            escalation_id: pending.id.clone(),
            step: pending.step,
            task: pending.task.clone(),
            question: pending.question.clone(),
        };
        lock(&self.escalations).insert(pending.id.clone(), EscalationSlot::Pending(pending));
        self.push(event);
    }

    pub fn pending_escalations(&self) -> Vec<EscalationView> {
        let mut views: Vec<EscalationView> = lock(&self.escalations)
            .values()
            .filter_map(|slot| match slot {
                EscalationSlot::Pending(p) => Some(EscalationView {
                    escalation_id: p.id.clone(),
                    step: p.step,
                    task: p.task.clone(),
                    question: p.question.clone(),
                }),
                EscalationSlot::Answered => None,
            })
            .collect();
        views.sort_by(|a, b| a.escalation_id.cmp(&b.escalation_id));
        views
    }

    /// Delivers `decision` to the blocked plan, at most once per escalation.
    pub fn answer(&self, escalation_id: &str, decision: HumanDecision) -> Result<(), AnswerError> {
        let mut escalations = lock(&self.escalations);
        match escalations.remove(escalation_id) {
            None => Err(AnswerError::NotPending(escalation_id.to_string())),
            Some(EscalationSlot::Answered) => {
                escalations.insert(escalation_id.to_string(), EscalationSlot::Answered);
                Err(AnswerError::AlreadyAnswered(escalation_id.to_string()))
            }
            Some(EscalationSlot::Pending(pending)) => {
                escalations.insert(escalation_id.to_string(), EscalationSlot::Answered);
                pending
                    .answer(decision)
                    .map_err(|_| AnswerError::NotPending(escalation_id.to_string()))
            }
        }
    }
}
