//! Function-calling descriptors derived from task definitions, and the
//! validator applied to the raw argument text a backend returns.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt;

use super::manifest::TaskDefinition;

const FUNCTION_PREFIX: &str = "fcall_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallVariant {
    FromFiles,
    FromFutures,
}

impl CallVariant {
    pub fn suffix(self) -> &'static str {
        match self {
            Self::FromFiles => "_from_files",
            Self::FromFutures => "_from_futures",
        }
    }

    pub fn function_name(self, task: &str) -> String {
        format!("{FUNCTION_PREFIX}{task}{}", self.suffix())
    }
}

/// Splits `fcall_<task>_(from_files|from_futures)` into its task name and variant.
pub fn parse_function_name(name: &str) -> Option<(&str, CallVariant)> {
    let rest = name.strip_prefix(FUNCTION_PREFIX)?;
    let (task, variant) = if let Some(task) = rest.strip_suffix(CallVariant::FromFiles.suffix()) {
        (task, CallVariant::FromFiles)
    } else {
        (rest.strip_suffix(CallVariant::FromFutures.suffix())?, CallVariant::FromFutures)
    };
    super::is_identifier(task).then_some((task, variant))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertySchema {
    #[serde(rename = "type")]
    pub value_type: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterSchema {
    #[serde(rename = "type")]
    pub schema_type: String,
    pub properties: IndexMap<String, PropertySchema>,
    pub required: Vec<String>,
}

/// Schema document advertising one callable function to the backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionDescriptor {
    pub name: String,
    pub description: String,
    pub parameters: ParameterSchema,
}

impl FunctionDescriptor {
    fn with_string_params<'a>(
        name: String,
        description: String,
        params: impl Iterator<Item = (&'a str, String)>,
    ) -> Self {
        let mut properties = IndexMap::new();
        let mut required = Vec::new();
        for (param, param_description) in params {
            properties.insert(
                param.to_string(),
                PropertySchema {
                    value_type: "string".to_string(),
                    description: param_description,
                },
            );
            required.push(param.to_string());
        }
        Self {
            name,
            description,
            parameters: ParameterSchema {
                schema_type: "object".to_string(),
                properties,
                required,
            },
        }
    }

    pub fn variant(&self) -> Option<CallVariant> {
        parse_function_name(&self.name).map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorPair {
    pub from_files: FunctionDescriptor,
    pub from_futures: FunctionDescriptor,
}

impl DescriptorPair {
    pub fn get(&self, variant: CallVariant) -> &FunctionDescriptor {
        match variant {
            CallVariant::FromFiles => &self.from_files,
            CallVariant::FromFutures => &self.from_futures,
        }
    }

    pub fn to_vec(&self) -> Vec<FunctionDescriptor> {
        vec![self.from_files.clone(), self.from_futures.clone()]
    }
}

/// Derives the `_from_files` and `_from_futures` descriptors of a task.
///
/// The files variant requires one string per file parameter, in declaration
/// order. The futures variant requires one future id per upstream slot.
pub fn derive_descriptors(task: &TaskDefinition) -> DescriptorPair {
    let files_description = task
        .files_description
        .clone()
        .unwrap_or_else(|| format!("{} from files", task.description));
    let futures_description = task
        .futures_description
        .clone()
        .unwrap_or_else(|| format!("{} from upstream AppFuture ids", task.description));

    let from_files = FunctionDescriptor::with_string_params(
        CallVariant::FromFiles.function_name(&task.name),
        files_description,
        task.file_params
            .iter()
            .map(|p| (p.name.as_str(), p.description.clone())),
    );
    let from_futures = FunctionDescriptor::with_string_params(
        CallVariant::FromFutures.function_name(&task.name),
        futures_description,
        task.upstream_slots.iter().map(|slot| {
            let description = slot
                .description
                .clone()
                .unwrap_or_else(|| format!("The {} id", slot.task));
            (slot.name.as_str(), description)
        }),
    );
    DescriptorPair {
        from_files,
        from_futures,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ArgumentError {
    #[error("malformed arguments for `{function}`: {message}")]
    Malformed { function: String, message: String },
    #[error("missing required argument `{key}` for `{function}`")]
    MissingKey { function: String, key: String },
    #[error("unexpected argument `{key}` for `{function}`")]
    UnexpectedKey { function: String, key: String },
    #[error("argument `{key}` for `{function}` must be a string, got {found}")]
    WrongType {
        function: String,
        key: String,
        found: &'static str,
    },
}

/// Name to value binding produced by [`validate_arguments`], ordered as the
/// descriptor's `required` list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoundArguments(pub IndexMap<String, String>);

impl BoundArguments {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Renders the binding like a Python dict literal: `{'key': 'value'}`.
    pub fn python_repr(&self) -> String {
        let body = self
            .0
            .iter()
            .map(|(k, v)| format!("{}: {}", python_str(k), python_str(v)))
            .collect::<Vec<_>>()
            .join(", ");
        format!("{{{body}}}")
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for BoundArguments {
    fn from_iter<T: IntoIterator<Item = (K, V)>>(iter: T) -> Self {
        Self(iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }
}

impl fmt::Display for BoundArguments {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.python_repr())
    }
}

fn python_str(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

fn json_type_name(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Parses `raw_args` exactly as returned by the backend and checks it against
/// the descriptor: an object whose keys are exactly the required set and whose
/// values are all strings.
pub fn validate_arguments(
    descriptor: &FunctionDescriptor,
    raw_args: &str,
) -> Result<BoundArguments, ArgumentError> {
    let function = || descriptor.name.clone();
    let value: Value = serde_json::from_str(raw_args).map_err(|e| ArgumentError::Malformed {
        function: function(),
        message: e.to_string(),
    })?;
    let Value::Object(object) = value else {
        return Err(ArgumentError::Malformed {
            function: function(),
            message: format!("expected a JSON object, got {}", json_type_name(&value)),
        });
    };

    let required = &descriptor.parameters.required;
    if let Some(key) = object.keys().find(|k| !required.contains(k)) {
        return Err(ArgumentError::UnexpectedKey {
            function: function(),
            key: key.clone(),
        });
    }
    let mut bound = IndexMap::with_capacity(required.len());
    for key in required {
        let value = object.get(key).ok_or_else(|| ArgumentError::MissingKey {
            function: function(),
            key: key.clone(),
        })?;
        let Value::String(text) = value else {
            return Err(ArgumentError::WrongType {
                function: function(),
                key: key.clone(),
                found: json_type_name(value),
            });
        };
        bound.insert(key.clone(), text.clone());
    }
    Ok(BoundArguments(bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::manifest::{ParamKind, ParameterSpec, UpstreamSlot};

    fn task(name: &str, params: &[&str], slots: &[&str]) -> TaskDefinition {
        TaskDefinition {
            name: name.into(),
            description: "d".into(),
            files_description: None,
            futures_description: None,
            file_params: params
                .iter()
                .map(|p| ParameterSpec {
                    name: p.to_string(),
                    description: format!("{p} path"),
                    kind: ParamKind::FilePath,
                })
                .collect(),
            upstream_slots: slots
                .iter()
                .map(|s| UpstreamSlot {
                    name: s.to_string(),
                    task: "up".into(),
                    description: None,
                    wiring: Default::default(),
                })
                .collect(),
            command_template: "true".into(),
            declared_outputs: vec![],
            outcome_checks: vec![],
            resource_hints: None,
        }
    }

    #[test]
    fn empty_task_yields_empty_schemas() {
        let pair = derive_descriptors(&task("t", &[], &[]));
        for d in [&pair.from_files, &pair.from_futures] {
            assert!(d.parameters.properties.is_empty());
            assert!(d.parameters.required.is_empty());
            assert_eq!(d.parameters.schema_type, "object");
        }
        assert_eq!(pair.from_files.name, "fcall_t_from_files");
        assert_eq!(pair.from_futures.name, "fcall_t_from_futures");
    }

    #[test]
    fn slot_description_defaults_to_upstream_id() {
        let pair = derive_descriptors(&task("t", &[], &["up_id"]));
        assert_eq!(
            pair.from_futures.parameters.properties["up_id"].description,
            "The up id"
        );
    }

    #[test]
    fn function_names_round_trip() {
        assert_eq!(
            parse_function_name("fcall_pyclone_vi_from_futures"),
            Some(("pyclone_vi", CallVariant::FromFutures))
        );
        assert_eq!(
            parse_function_name("fcall_vcf_transform_from_files"),
            Some(("vcf_transform", CallVariant::FromFiles))
        );
        assert_eq!(parse_function_name("fcall__from_files"), None);
        assert_eq!(parse_function_name("vcf_transform_from_files"), None);
        assert_eq!(parse_function_name("fcall_x_from_somewhere"), None);
    }

    #[test]
    fn validation_errors_name_the_key() {
        let pair = derive_descriptors(&task("t", &["a", "b"], &[]));
        let d = &pair.from_files;
        assert_eq!(
            validate_arguments(d, r#"{"a":"x","b":"y","c":"z"}"#),
            Err(ArgumentError::UnexpectedKey {
                function: "fcall_t_from_files".into(),
                key: "c".into()
            })
        );
        assert_eq!(
            validate_arguments(d, "{}"),
            Err(ArgumentError::MissingKey {
                function: "fcall_t_from_files".into(),
                key: "a".into()
            })
        );
        assert!(matches!(
            validate_arguments(d, r#"{"a":"x","b":3}"#),
            Err(ArgumentError::WrongType { found: "number", .. })
        ));
        assert!(matches!(
            validate_arguments(d, "{"),
            Err(ArgumentError::Malformed { .. })
        ));
        assert!(matches!(
            validate_arguments(d, "[]"),
            Err(ArgumentError::Malformed { .. })
        ));
    }

    #[test]
    fn binding_follows_required_order() {
        let pair = derive_descriptors(&task("t", &["a", "b"], &[]));
        let bound = validate_arguments(&pair.from_files, r#"{"b":"2","a":"1"}"#).unwrap();
        assert_eq!(bound.python_repr(), "{'a': '1', 'b': '2'}");
    }

    #[test]
    fn python_repr_escapes_quotes() {
        let bound: BoundArguments = [("k", "it's")].into_iter().collect();
        assert_eq!(bound.python_repr(), r"{'k': 'it\'s'}");
    }
}
