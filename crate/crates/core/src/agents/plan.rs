//! Structured plans over registry tasks.
//!
//! Plans are exchanged as JSON:
//!
//! ```json
//! {"steps": [
//!   {"task": "vcf_transform", "files": {"vep_vcf": "./example_data/in.vcf"}},
//!   {"task": "pyclone_vi", "after": {"vcf_future_id": 1}}
//! ]}
//! ```
//!
//! Steps are numbered from 1. An `after` binding maps each upstream slot of
//! the task to the number of an earlier step.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::registry::{CheckKind, OutcomePredicate, OutputSource, Registry, TaskDefinition};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceConstraints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_memory: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_storage: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_class: Option<String>,
}

impl ResourceConstraints {
    pub fn from_task(task: &TaskDefinition) -> Self {
        let hints = task.resource_hints.clone().unwrap_or_default();
        Self {
            max_memory: hints.memory_bytes,
            max_storage: hints.storage_bytes,
            server_class: hints.server_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepBinding {
    /// File parameter name to path.
    Files(IndexMap<String, String>),
    /// Upstream slot name to the number of an earlier step.
    After(IndexMap<String, usize>),
}

impl StepBinding {
    pub fn dependencies(&self) -> Vec<usize> {
        match self {
            Self::Files(_) => Vec::new(),
            Self::After(refs) => refs.values().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub index: usize,
    pub task: String,
    #[serde(flatten)]
    pub binding: StepBinding,
    pub expected_outcome: Vec<OutcomePredicate>,
    pub constraints: ResourceConstraints,
}

/// A step as proposed by a backend, before validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<IndexMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after: Option<IndexMap<String, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_outcome: Option<Vec<OutcomePredicate>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<ResourceConstraints>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDocument {
    steps: Vec<StepSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<PlanStep>,
    pub source_description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("plan is not valid JSON: {0}")]
    Parse(String),
    #[error("plan has no steps")]
    Empty,
    #[error("step {step}: unknown task `{task}`")]
    UnknownTask { step: usize, task: String },
    #[error("step {step}: {message}")]
    Binding { step: usize, message: String },
    #[error("step {step}: slot `{slot}` refers to step {target}, which does not come before it")]
    ForwardReference { step: usize, slot: String, target: usize },
    #[error("step {step}: slot `{slot}` needs a `{expected}` step, step {target} runs `{found}`")]
    SlotTaskMismatch {
        step: usize,
        slot: String,
        target: usize,
        expected: String,
        found: String,
    },
    #[error("step {step}: invalid predicate {predicate}: {message}")]
    InvalidPredicate {
        step: usize,
        predicate: String,
        message: String,
    },
    #[error("registry has no tasks")]
    EmptyRegistry,
    #[error("no valid plan after {attempts} attempts: {last_error}")]
    Unplannable { attempts: u32, last_error: String },
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
}

/// Strips a surrounding Markdown code fence, if any.
pub(crate) fn strip_fence(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

pub fn parse_step_specs(text: &str) -> Result<Vec<StepSpec>, PlanError> {
    let doc: PlanDocument =
        serde_json::from_str(strip_fence(text)).map_err(|e| PlanError::Parse(e.to_string()))?;
    Ok(doc.steps)
}

fn validate_predicate(step: usize, task: &TaskDefinition, predicate: &OutcomePredicate) -> Result<(), PlanError> {
    let invalid = |message: String| PlanError::InvalidPredicate {
        step,
        predicate: predicate.to_string(),
        message,
    };
    match (&predicate.target, predicate.kind.needs_target()) {
        (None, true) => return Err(invalid("missing target".into())),
        (Some(_), false) => return Err(invalid("takes no target".into())),
        _ => {}
    }
    if let Some(role) = &predicate.target {
        let output = task
            .output(role)
            .ok_or_else(|| invalid(format!("task `{}` declares no output `{role}`", task.name)))?;
        let fits = match predicate.kind {
            CheckKind::OutputExists => matches!(output.source, OutputSource::Path(_)),
            CheckKind::GlobNonempty => matches!(output.source, OutputSource::Glob(_)),
            _ => true,
        };
        if !fits {
            return Err(invalid(format!("output `{role}` has the wrong kind")));
        }
    }
    Ok(())
}

fn keys_match<'a>(
    step: usize,
    what: &str,
    given: impl Iterator<Item = &'a String>,
    expected: &[&str],
) -> Result<(), PlanError> {
    let given: Vec<&String> = given.collect();
    if let Some(extra) = given.iter().find(|k| !expected.contains(&k.as_str())) {
        return Err(PlanError::Binding {
            step,
            message: format!("unexpected {what} `{extra}`"),
        });
    }
    if let Some(missing) = expected.iter().find(|e| !given.iter().any(|k| k == *e)) {
        return Err(PlanError::Binding {
            step,
            message: format!("missing {what} `{missing}`"),
        });
    }
    Ok(())
}

/// Validates `spec` as step number `index`, given the steps before it.
fn build_step(
    registry: &Registry,
    index: usize,
    spec: StepSpec,
    earlier: &[PlanStep],
) -> Result<PlanStep, PlanError> {
    let task = registry.task(&spec.task).ok_or_else(|| PlanError::UnknownTask {
        step: index,
        task: spec.task.clone(),
    })?;
    let binding = match (spec.files, spec.after) {
        (Some(_), Some(_)) => {
            return Err(PlanError::Binding {
                step: index,
                message: "give either `files` or `after`, not both".into(),
            })
        }
        (None, None) if task.file_params.is_empty() => StepBinding::Files(IndexMap::new()),
        (None, None) => {
            return Err(PlanError::Binding {
                step: index,
                message: "missing `files` or `after` binding".into(),
            })
        }
        (Some(files), None) => {
            let params: Vec<&str> = task.file_params.iter().map(|p| p.name.as_str()).collect();
            keys_match(index, "file parameter", files.keys(), &params)?;
            StepBinding::Files(files)
        }
        (None, Some(after)) => {
            if task.upstream_slots.is_empty() {
                return Err(PlanError::Binding {
                    step: index,
                    message: format!("task `{}` has no upstream slots", task.name),
                });
            }
            let slots: Vec<&str> = task.upstream_slots.iter().map(|s| s.name.as_str()).collect();
            keys_match(index, "slot", after.keys(), &slots)?;
            for (slot, &target) in &after {
                if target == 0 || target >= index {
                    return Err(PlanError::ForwardReference {
                        step: index,
                        slot: slot.clone(),
                        target,
                    });
                }
                let expected = &task.slot(slot).expect("checked above").task;
                let found = &earlier[target - 1].task;
                if expected != found {
                    return Err(PlanError::SlotTaskMismatch {
                        step: index,
                        slot: slot.clone(),
                        target,
                        expected: expected.clone(),
                        found: found.clone(),
                    });
                }
            }
            StepBinding::After(after)
        }
    };
    let expected_outcome = spec.expected_outcome.unwrap_or_else(|| task.effective_checks());
    for predicate in &expected_outcome {
        validate_predicate(index, task, predicate)?;
    }
    Ok(PlanStep {
        index,
        task: task.name.clone(),
        binding,
        expected_outcome,
        constraints: spec.constraints.unwrap_or_else(|| ResourceConstraints::from_task(task)),
    })
}

impl Plan {
    /// Validates proposed steps against `registry`.
    pub fn from_specs(
        description: impl Into<String>,
        specs: Vec<StepSpec>,
        registry: &Registry,
    ) -> Result<Self, PlanError> {
        if specs.is_empty() {
            return Err(PlanError::Empty);
        }
        let mut steps: Vec<PlanStep> = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let step = build_step(registry, i + 1, spec, &steps)?;
            steps.push(step);
        }
        Ok(Self {
            steps,
            source_description: description.into(),
        })
    }

    pub fn parse(description: impl Into<String>, text: &str, registry: &Registry) -> Result<Self, PlanError> {
        Self::from_specs(description, parse_step_specs(text)?, registry)
    }

    /// A copy of this plan with steps `from..` replaced by `specs`.
    pub fn with_replacement(
        &self,
        from: usize,
        specs: Vec<StepSpec>,
        registry: &Registry,
    ) -> Result<Self, PlanError> {
        let mut steps: Vec<PlanStep> = self.steps.iter().take(from.saturating_sub(1)).cloned().collect();
        if steps.is_empty() && specs.is_empty() {
            return Err(PlanError::Empty);
        }
        for spec in specs {
            let step = build_step(registry, steps.len() + 1, spec, &steps)?;
            steps.push(step);
        }
        Ok(Self {
            steps,
            source_description: self.source_description.clone(),
        })
    }

    pub fn step(&self, index: usize) -> Option<&PlanStep> {
        index.checked_sub(1).and_then(|i| self.steps.get(i))
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One-paragraph summary handed to per-step conversations.
    pub fn summary(&self) -> String {
        let steps: Vec<String> = self
            .steps
            .iter()
            .map(|s| match &s.binding {
                StepBinding::Files(_) => format!("{}. {} on input files", s.index, s.task),
                StepBinding::After(refs) => {
                    let deps: Vec<String> = refs.values().map(|r| format!("step {r}")).collect();
                    format!("{}. {} after {}", s.index, s.task, deps.join(" and "))
                }
            })
            .collect();
        format!(
            "Workflow plan for \"{}\": {}.",
            self.source_description,
            steps.join("; ")
        )
    }

    /// The steps as a plan document, suitable for [`Plan::parse`].
    pub fn to_specs(&self) -> Vec<StepSpec> {
        self.steps
            .iter()
            .map(|s| {
                let (files, after) = match &s.binding {
                    StepBinding::Files(f) => (Some(f.clone()), None),
                    StepBinding::After(a) => (None, Some(a.clone())),
                };
                StepSpec {
                    task: s.task.clone(),
                    files,
                    after,
                    expected_outcome: Some(s.expected_outcome.clone()),
                    constraints: Some(s.constraints.clone()),
                }
            })
            .collect()
    }
}

impl fmt::Display for PlanStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} ({})", self.index, self.task)
    }
}
