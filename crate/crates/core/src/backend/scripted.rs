//! Deterministic backend driven by an ordered rule script.
//!
//! A script is a JSON object with a `rules` list. Each rule matches the latest
//! user message and answers with a response template:
//!
//! ```json
//! {"rules": [
//!   {"match": {"contains": "transform the vcf file"},
//!    "respond": {"function_call": {"name": "fcall_vcf_transform_from_files",
//!                                  "arguments": {"vep_vcf": "./in.vcf"}}},
//!    "consume_once": true},
//!   {"match": {"regex": "id: (?P<id>future_\\d+_run_vcf_transform)"},
//!    "respond": {"function_call": {"name": "fcall_pyclone_vi_from_futures",
//!                                  "arguments": "{\"vcf_future_id\": \"${id}\"}"}},
//!    "consume_once": true},
//!   {"match": "always", "respond": {"final": "DONE"}}
//! ]}
//! ```
//!
//! Rules are tried in order; the first unconsumed match fires. Templates of
//! `regex` rules may reference capture groups as `$1` or `${name}`. Arguments
//! and final content are either raw text, passed through untouched, or a JSON
//! value, serialized compactly.

use std::sync::Mutex;

use async_trait::async_trait;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Backend, BackendError, BackendRequest, BackendResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchSpec {
    Always,
    Contains(String),
    Regex(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TextOrJson {
    Text(String),
    Json(Value),
}

impl TextOrJson {
    fn to_text(&self) -> String {
        match self {
            Self::Text(text) => text.clone(),
            Self::Json(value) => value.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionCallTemplate {
    pub name: String,
    pub arguments: TextOrJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseTemplate {
    FunctionCall(FunctionCallTemplate),
    Final(TextOrJson),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: MatchSpec,
    pub respond: ResponseTemplate,
    #[serde(default)]
    pub consume_once: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Script {
    rules: Vec<ScriptRule>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("script parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("script has no rules")]
    Empty,
    #[error("script has no default (`always`) rule")]
    NoDefaultRule,
    #[error("rule {index}: invalid regex: {message}")]
    InvalidRegex { index: usize, message: String },
    #[error("cannot read script {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

enum Matcher {
    Always,
    Contains(String),
    Regex(Regex),
}

struct CompiledRule {
    matcher: Matcher,
    respond: ResponseTemplate,
    consume_once: bool,
}

impl CompiledRule {
    fn respond_to(&self, latest: &str) -> Option<BackendResponse> {
        let expand = |template: String| -> Option<String> {
            match &self.matcher {
                Matcher::Regex(re) => {
                    let caps = re.captures(latest)?;
                    let mut out = String::new();
                    caps.expand(&template, &mut out);
                    Some(out)
                }
                Matcher::Always => Some(template),
                Matcher::Contains(needle) => latest.contains(needle.as_str()).then_some(template),
            }
        };
        Some(match &self.respond {
            ResponseTemplate::FunctionCall(call) => BackendResponse::function_call(
                expand(call.name.clone())?,
                expand(call.arguments.to_text())?,
            ),
            ResponseTemplate::Final(content) => BackendResponse::final_message(expand(content.to_text())?),
        })
    }
}

/// Backend replaying a rule script. Responses are a pure function of the
/// script and the sequence of requests it has seen.
pub struct ScriptedBackend {
    rules: Vec<CompiledRule>,
    source: Vec<ScriptRule>,
    consumed: Mutex<Vec<bool>>,
    calls: Mutex<usize>,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("rules", &self.source)
            .finish_non_exhaustive()
    }
}

impl ScriptedBackend {
    pub fn load_script(script_text: &str) -> Result<Self, ScriptError> {
        let script: Script = serde_json::from_str(script_text).map_err(|e| ScriptError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_rules(script.rules)
    }

    pub fn load_file(path: impl AsRef<std::path::Path>) -> Result<Self, ScriptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::load_script(&text)
    }

    pub fn from_rules(rules: Vec<ScriptRule>) -> Result<Self, ScriptError> {
        if rules.is_empty() {
            return Err(ScriptError::Empty);
        }
        if !rules.iter().any(|r| r.matcher == MatchSpec::Always) {
            return Err(ScriptError::NoDefaultRule);
        }
        let compiled = rules
            .iter()
            .enumerate()
            .map(|(index, rule)| {
                let matcher = match &rule.matcher {
                    MatchSpec::Always => Matcher::Always,
                    MatchSpec::Contains(s) => Matcher::Contains(s.clone()),
                    MatchSpec::Regex(pattern) => Matcher::Regex(Regex::new(pattern).map_err(|e| {
                        ScriptError::InvalidRegex {
                            index,
                            message: e.to_string(),
                        }
                    })?),
                };
                Ok(CompiledRule {
                    matcher,
                    respond: rule.respond.clone(),
                    consume_once: rule.consume_once,
                })
            })
            .collect::<Result<Vec<_>, ScriptError>>()?;
        Ok(Self {
            consumed: Mutex::new(vec![false; compiled.len()]),
            rules: compiled,
            source: rules,
            calls: Mutex::new(0),
        })
    }

    /// A backend with the same script and no rule consumed yet.
    pub fn fresh(&self) -> Self {
        Self::from_rules(self.source.clone()).expect("rules were already validated")
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.source
    }

    /// Number of requests answered so far.
    pub fn call_count(&self) -> usize {
        *self.calls.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn answer(&self, latest: &str) -> Result<BackendResponse, BackendError> {
        let mut consumed = self.consumed.lock().unwrap_or_else(|e| e.into_inner());
        for (i, rule) in self.rules.iter().enumerate() {
            if consumed[i] {
                continue;
            }
            if let Some(response) = rule.respond_to(latest) {
                if rule.consume_once {
                    consumed[i] = true;
                }
                *self.calls.lock().unwrap_or_else(|e| e.into_inner()) += 1;
                return Ok(response);
            }
        }
        Err(BackendError::NoMatchingRule {
            latest: latest.to_string(),
        })
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.answer(request.latest_user_message())
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_defaultless_scripts_are_rejected() {
        assert!(matches!(ScriptedBackend::load_script(r#"{"rules": []}"#), Err(ScriptError::Empty)));
        let no_default = r#"{"rules": [{"match": {"contains": "x"}, "respond": {"final": "DONE"}}]}"#;
        assert!(matches!(ScriptedBackend::load_script(no_default), Err(ScriptError::NoDefaultRule)));
        assert!(matches!(ScriptedBackend::load_script("{"), Err(ScriptError::Parse { .. })));
        let bad_regex = r#"{"rules": [{"match": {"regex": "("}, "respond": {"final": "x"}},
                                      {"match": "always", "respond": {"final": "DONE"}}]}"#;
        assert!(matches!(
            ScriptedBackend::load_script(bad_regex),
            Err(ScriptError::InvalidRegex { index: 0, .. })
        ));
    }

    #[test]
    fn consume_once_rules_fire_once() {
        let backend = ScriptedBackend::load_script(
            r#"{"rules": [
                {"match": {"contains": "go"}, "respond": {"function_call": {"name": "f", "arguments": {}}}, "consume_once": true},
                {"match": "always", "respond": {"final": "DONE"}}
            ]}"#,
        )
        .unwrap();
        assert_eq!(backend.answer("go").unwrap(), BackendResponse::function_call("f", "{}"));
        assert_eq!(backend.answer("go").unwrap(), BackendResponse::final_message("DONE"));
        assert_eq!(backend.call_count(), 2);
        let fresh = backend.fresh();
        assert_eq!(fresh.answer("go").unwrap(), BackendResponse::function_call("f", "{}"));
    }

    #[test]
    fn regex_captures_expand_into_templates() {
        let backend = ScriptedBackend::load_script(
            r#"{"rules": [
                {"match": {"regex": "Call (?P<f>\\w+) with (?P<a>\\{.*\\})"},
                 "respond": {"function_call": {"name": "${f}", "arguments": "${a}"}}},
                {"match": "always", "respond": {"final": "DONE"}}
            ]}"#,
        )
        .unwrap();
        assert_eq!(
            backend.answer(r#"Call fcall_t_from_files with {"a": "b"}"#).unwrap(),
            BackendResponse::function_call("fcall_t_from_files", r#"{"a": "b"}"#)
        );
    }

    #[test]
    fn raw_argument_text_is_preserved() {
        let backend = ScriptedBackend::load_script(
            r#"{"rules": [{"match": "always", "respond": {"function_call": {"name": "f", "arguments": "{"}}}]}"#,
        )
        .unwrap();
        assert_eq!(backend.answer("").unwrap(), BackendResponse::function_call("f", "{"));
    }

    #[test]
    fn exhausted_script_reports_no_match() {
        let backend = ScriptedBackend::load_script(
            r#"{"rules": [{"match": "always", "respond": {"final": "DONE"}, "consume_once": true}]}"#,
        )
        .unwrap();
        backend.answer("x").unwrap();
        assert!(matches!(backend.answer("x"), Err(BackendError::NoMatchingRule { .. })));
    }
}
