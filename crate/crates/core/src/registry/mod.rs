//! Task registry: loads a manifest, validates it, and derives the pair of
//! function descriptors advertised for every task.
//!
//! A manifest is a JSON document with a top-level `tasks` list. See
//! `docs/manifest.md` for the full format.

mod descriptor;
mod manifest;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;

pub use descriptor::{
    derive_descriptors, parse_function_name, validate_arguments, ArgumentError, BoundArguments,
    CallVariant, DescriptorPair, FunctionDescriptor, ParameterSchema, PropertySchema,
};
pub use manifest::{
    CheckKind, Manifest, OutcomePredicate, OutputSource, OutputSpec, ParamKind, ParameterSpec,
    ResourceHints, TaskDefinition, UpstreamSlot,
};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid {what} identifier `{value}`")]
    InvalidIdentifier { what: &'static str, value: String },
    #[error("duplicate task name `{0}`")]
    DuplicateTask(String),
    #[error("task `{task}`: duplicate {what} `{name}`")]
    Duplicate {
        task: String,
        what: &'static str,
        name: String,
    },
    #[error("task `{task}`: command references unbound placeholder `{placeholder}`")]
    UnboundPlaceholder { task: String, placeholder: String },
    #[error("task `{task}`: invalid check `{check}`: {reason}")]
    InvalidCheck {
        task: String,
        check: String,
        reason: String,
    },
    #[error("task `{task}`: invalid upstream slot `{slot}`: {reason}")]
    InvalidSlot {
        task: String,
        slot: String,
        reason: String,
    },
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('a'..='z'))
        && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\{([^}]*)\}").expect("valid placeholder regex"))
}

/// Names of every `${param}` placeholder in a command template, in order of appearance.
pub fn placeholders(template: &str) -> impl Iterator<Item = &str> {
    placeholder_regex()
        .captures_iter(template)
        .map(|c| c.get(1).map_or("", |m| m.as_str()))
}

/// Replaces every `${param}` placeholder using `lookup`.
pub fn substitute_placeholders(template: &str, mut lookup: impl FnMut(&str) -> String) -> String {
    placeholder_regex()
        .replace_all(template, |caps: &regex::Captures<'_>| lookup(&caps[1]))
        .into_owned()
}

fn check_identifier(what: &'static str, value: &str) -> Result<(), ManifestError> {
    if is_identifier(value) {
        Ok(())
    } else {
        Err(ManifestError::InvalidIdentifier {
            what,
            value: value.to_string(),
        })
    }
}

fn check_unique<'a>(
    task: &str,
    what: &'static str,
    names: impl Iterator<Item = &'a str>,
) -> Result<(), ManifestError> {
    let mut seen = HashSet::new();
    for name in names {
        check_identifier(what, name)?;
        if !seen.insert(name) {
            return Err(ManifestError::Duplicate {
                task: task.to_string(),
                what,
                name: name.to_string(),
            });
        }
    }
    Ok(())
}

fn validate_task(task: &TaskDefinition) -> Result<(), ManifestError> {
    check_identifier("task", &task.name)?;
    check_unique(&task.name, "parameter", task.file_params.iter().map(|p| p.name.as_str()))?;
    check_unique(&task.name, "output role", task.declared_outputs.iter().map(|o| o.role.as_str()))?;
    check_unique(&task.name, "slot", task.upstream_slots.iter().map(|s| s.name.as_str()))?;

    if let Some(placeholder) = placeholders(&task.command_template).find(|p| task.file_param(p).is_none()) {
        return Err(ManifestError::UnboundPlaceholder {
            task: task.name.clone(),
            placeholder: placeholder.to_string(),
        });
    }

    for check in &task.outcome_checks {
        let invalid = |reason: String| ManifestError::InvalidCheck {
            task: task.name.clone(),
            check: check.to_string(),
            reason,
        };
        match (&check.target, check.kind.needs_target()) {
            (None, true) => return Err(invalid("an output role target is required".into())),
            (Some(_), false) => return Err(invalid("this check takes no target".into())),
            (Some(role), true) => {
                let output = task
                    .output(role)
                    .ok_or_else(|| invalid(format!("unknown output role `{role}`")))?;
                match (check.kind, &output.source) {
                    (CheckKind::OutputExists, OutputSource::Path(_))
                    | (CheckKind::GlobNonempty, OutputSource::Glob(_)) => {}
                    (CheckKind::OutputExists, _) => {
                        return Err(invalid(format!("`{role}` is a glob output; use glob-nonempty")))
                    }
                    _ => return Err(invalid(format!("`{role}` is a literal output; use output-exists"))),
                }
            }
            (None, false) => {}
        }
    }

    let mut wired = HashSet::new();
    for slot in &task.upstream_slots {
        let invalid = |reason: String| ManifestError::InvalidSlot {
            task: task.name.clone(),
            slot: slot.name.clone(),
            reason,
        };
        for param in slot.wiring.keys() {
            if task.file_param(param).is_none() {
                return Err(invalid(format!("wiring targets unknown parameter `{param}`")));
            }
            if !wired.insert(param.as_str()) {
                return Err(invalid(format!("parameter `{param}` is wired by more than one slot")));
            }
        }
    }
    Ok(())
}

/// Immutable set of validated tasks with their derived descriptors.
#[derive(Debug, Clone)]
pub struct Registry {
    name: String,
    source_dir: Option<PathBuf>,
    tasks: Vec<TaskDefinition>,
    index: HashMap<String, usize>,
    descriptors: Vec<DescriptorPair>,
}

impl Registry {
    /// Parses and validates manifest text.
    pub fn load_manifest(manifest_text: &str) -> Result<Self, ManifestError> {
        let manifest: Manifest =
            serde_json::from_str(manifest_text).map_err(|e| ManifestError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        Self::from_manifest(manifest)
    }

    /// Loads a manifest file. Its directory becomes the registry's source
    /// directory and its file stem the default registry name.
    pub fn load_file(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut registry = Self::load_manifest(&text)?;
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        registry.source_dir = Some(std::path::absolute(dir).unwrap_or_else(|_| dir.to_path_buf()));
        if registry.name.is_empty() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                registry.name = stem.to_string();
            }
        }
        Ok(registry)
    }

    pub fn from_manifest(manifest: Manifest) -> Result<Self, ManifestError> {
        let mut index = HashMap::with_capacity(manifest.tasks.len());
        for (i, task) in manifest.tasks.iter().enumerate() {
            validate_task(task)?;
            if index.insert(task.name.clone(), i).is_some() {
                return Err(ManifestError::DuplicateTask(task.name.clone()));
            }
        }
        // Slot wiring refers to other tasks, so it is checked once all are indexed.
        for task in &manifest.tasks {
            for slot in &task.upstream_slots {
                let invalid = |reason: String| ManifestError::InvalidSlot {
                    task: task.name.clone(),
                    slot: slot.name.clone(),
                    reason,
                };
                let upstream = index
                    .get(&slot.task)
                    .map(|&i| &manifest.tasks[i])
                    .ok_or_else(|| invalid(format!("unknown upstream task `{}`", slot.task)))?;
                for role in slot.wiring.values() {
                    if upstream.output(role).is_none() {
                        return Err(invalid(format!(
                            "task `{}` declares no output role `{role}`",
                            upstream.name
                        )));
                    }
                }
            }
        }
        let descriptors = manifest.tasks.iter().map(derive_descriptors).collect();
        Ok(Self {
            name: manifest.name.unwrap_or_default(),
            source_dir: None,
            tasks: manifest.tasks,
            index,
            descriptors,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Directory of the manifest file, when loaded from disk.
    pub fn source_dir(&self) -> Option<&Path> {
        self.source_dir.as_deref()
    }

    pub fn with_source_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.source_dir = Some(dir.into());
        self
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[TaskDefinition] {
        &self.tasks
    }

    pub fn task(&self, name: &str) -> Option<&TaskDefinition> {
        self.index.get(name).map(|&i| &self.tasks[i])
    }

    pub fn descriptor_pair(&self, task: &str) -> Option<&DescriptorPair> {
        self.index.get(task).map(|&i| &self.descriptors[i])
    }

    /// Every descriptor, two per task in manifest order.
    pub fn descriptors(&self) -> Vec<FunctionDescriptor> {
        self.descriptors.iter().flat_map(DescriptorPair::to_vec).collect()
    }

    /// Resolves a function name to its task, variant and descriptor.
    pub fn function(&self, name: &str) -> Option<(&TaskDefinition, CallVariant, &FunctionDescriptor)> {
        let (task_name, variant) = parse_function_name(name)?;
        let &i = self.index.get(task_name)?;
        Some((&self.tasks[i], variant, self.descriptors[i].get(variant)))
    }
}
