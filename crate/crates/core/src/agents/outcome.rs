//! Post-execution outcome checks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plan::PlanStep;
use crate::engine::{find_output, ExecutionRecord, FutureId};
use crate::registry::{CheckKind, OutcomePredicate, OutputSource, TaskDefinition};
use crate::transcript::Transcript;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub predicate: OutcomePredicate,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step_index: usize,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub future_id: Option<FutureId>,
    /// `None` when the step failed before launch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<ExecutionRecord>,
    pub checks: Vec<CheckResult>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Per-step conversation, when the step was dispatched through one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversation: Option<Transcript>,
}

impl StepOutcome {
    /// Outcome of a step that never produced an execution record.
    pub fn not_launched(step: &PlanStep, future_id: Option<FutureId>, error: impl Into<String>) -> Self {
        Self {
            step_index: step.index,
            task: step.task.clone(),
            future_id,
            record: None,
            checks: Vec::new(),
            verdict: Verdict::Failed,
            error: Some(error.into()),
            conversation: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.verdict == Verdict::Ok
    }

    /// Short human-readable reason for a failed verdict.
    pub fn failure_summary(&self) -> String {
        if let Some(error) = &self.error {
            return error.clone();
        }
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.predicate.to_string())
            .collect();
        let exit = self.record.as_ref().map_or(-1, |r| r.exit_code);
        if failed.is_empty() {
            format!("exit code {exit}")
        } else {
            format!("exit code {exit}, failed checks: {}", failed.join(", "))
        }
    }
}

fn evaluate(predicate: &OutcomePredicate, task: &TaskDefinition, record: &ExecutionRecord) -> (bool, Option<String>) {
    let output = || predicate.target.as_deref().and_then(|role| task.output(role));
    match predicate.kind {
        CheckKind::ExitCodeZero => (
            record.exit_code == 0,
            (record.exit_code != 0).then(|| format!("exit code {}", record.exit_code)),
        ),
        CheckKind::OutputExists => match output().map(|o| &o.source) {
            Some(OutputSource::Path(path)) => {
                let full = record.output_dir.join(path);
                let ok = full.is_file();
                (ok, (!ok).then(|| format!("{} not found", full.display())))
            }
            _ => (false, Some("no such path output".into())),
        },
        CheckKind::GlobNonempty => match output() {
            Some(spec) => {
                let ok = !find_output(&spec.source, &record.output_dir).is_empty();
                (ok, (!ok).then(|| "no files match".to_string()))
            }
            None => (false, Some("no such output".into())),
        },
        CheckKind::StderrEmpty => {
            let len = std::fs::metadata(&record.stderr_path).map_or(0, |m| m.len());
            (len == 0, (len > 0).then(|| format!("stderr has {len} bytes")))
        }
    }
}

/// Evaluates every expected predicate of `step` against the files on disk.
/// The verdict is ok iff all checks pass and the exit code is zero.
pub fn check_outcome(step: &PlanStep, task: &TaskDefinition, record: &ExecutionRecord) -> StepOutcome {
    let checks: Vec<CheckResult> = step
        .expected_outcome
        .iter()
        .map(|predicate| {
            let (passed, detail) = evaluate(predicate, task, record);
            CheckResult {
                predicate: predicate.clone(),
                passed,
                detail,
            }
        })
        .collect();
    let verdict = if record.exit_code == 0 && checks.iter().all(|c| c.passed) {
        Verdict::Ok
    } else {
        Verdict::Failed
    };
    StepOutcome {
        step_index: step.index,
        task: step.task.clone(),
        future_id: None,
        record: Some(record.clone()),
        checks,
        verdict,
        error: record.cause.clone(),
        conversation: None,
    }
}

/// Last `max_lines` lines of a file, or `""` if unreadable.
pub fn tail_file(path: &Path, max_lines: usize) -> String {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(max_lines)..].join("\n")
}
