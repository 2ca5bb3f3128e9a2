//! Declarative task definitions as they appear in a manifest.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    FilePath,
    StringLiteral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_param_kind")]
    pub kind: ParamKind,
}

fn default_param_kind() -> ParamKind {
    ParamKind::FilePath
}

/// Where a declared output is found, relative to the future's output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputSource {
    Path(String),
    Glob(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawOutput", into = "RawOutput")]
pub struct OutputSpec {
    pub role: String,
    pub source: OutputSource,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    glob: Option<String>,
}

impl TryFrom<RawOutput> for OutputSpec {
    type Error = String;

    fn try_from(raw: RawOutput) -> Result<Self, Self::Error> {
        let source = match (raw.path, raw.glob) {
            (Some(path), None) => OutputSource::Path(path),
            (None, Some(glob)) => OutputSource::Glob(glob),
            _ => {
                return Err(format!(
                    "output `{}` must declare exactly one of `path` or `glob`",
                    raw.role
                ))
            }
        };
        Ok(Self {
            role: raw.role,
            source,
        })
    }
}

impl From<OutputSpec> for RawOutput {
    fn from(spec: OutputSpec) -> Self {
        let (path, glob) = match spec.source {
            OutputSource::Path(p) => (Some(p), None),
            OutputSource::Glob(g) => (None, Some(g)),
        };
        Self {
            role: spec.role,
            path,
            glob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    ExitCodeZero,
    OutputExists,
    GlobNonempty,
    StderrEmpty,
}

impl CheckKind {
    pub fn needs_target(self) -> bool {
        matches!(self, Self::OutputExists | Self::GlobNonempty)
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ExitCodeZero => "exit-code-zero",
            Self::OutputExists => "output-exists",
            Self::GlobNonempty => "glob-nonempty",
            Self::StderrEmpty => "stderr-empty",
        })
    }
}

/// Post-execution check declared on a task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomePredicate {
    pub kind: CheckKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

impl OutcomePredicate {
    pub fn exit_code_zero() -> Self {
        Self {
            kind: CheckKind::ExitCodeZero,
            target: None,
        }
    }
}

impl fmt::Display for OutcomePredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.target {
            Some(target) => write!(f, "{}({target})", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceHints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_class: Option<String>,
}

/// A dependency slot filled with the id of an upstream future.
///
/// `wiring` maps each of this task's file parameters fed by the slot to the
/// upstream task's output role that provides it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamSlot {
    pub name: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default)]
    pub wiring: IndexMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDefinition {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Overrides the derived description of the `_from_files` function.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files_description: Option<String>,
    /// Overrides the derived description of the `_from_futures` function.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub futures_description: Option<String>,
    #[serde(default)]
    pub file_params: Vec<ParameterSpec>,
    #[serde(default)]
    pub upstream_slots: Vec<UpstreamSlot>,
    #[serde(rename = "command")]
    pub command_template: String,
    #[serde(default, rename = "outputs")]
    pub declared_outputs: Vec<OutputSpec>,
    #[serde(default, rename = "checks")]
    pub outcome_checks: Vec<OutcomePredicate>,
    #[serde(default, rename = "resources", skip_serializing_if = "Option::is_none")]
    pub resource_hints: Option<ResourceHints>,
}

impl TaskDefinition {
    pub fn file_param(&self, name: &str) -> Option<&ParameterSpec> {
        self.file_params.iter().find(|p| p.name == name)
    }

    pub fn output(&self, role: &str) -> Option<&OutputSpec> {
        self.declared_outputs.iter().find(|o| o.role == role)
    }

    pub fn slot(&self, name: &str) -> Option<&UpstreamSlot> {
        self.upstream_slots.iter().find(|s| s.name == name)
    }

    /// Checks applied when a step of this task is executed. Falls back to
    /// `exit-code-zero` when the manifest declares none.
    pub fn effective_checks(&self) -> Vec<OutcomePredicate> {
        if self.outcome_checks.is_empty() {
            vec![OutcomePredicate::exit_code_zero()]
        } else {
            self.outcome_checks.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub tasks: Vec<TaskDefinition>,
}
