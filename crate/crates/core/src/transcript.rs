//! Conversation transcripts: the structured event record and its
//! line-oriented text rendering.
//!
//! The rendering mirrors the console layout of the original prototype:
//!
//! ```text
//! Function Calling
//! Function Name:  fcall_vcf_transform_from_files
//! Function Args:  {'vep_vcf': './example_data/VEP_raw.A25.mutect2.filtered.snp.vcf'}
//! <AppFuture future_5_run_vcf_transform state=pending>
//!
//! Task scheduled with AppFuture id: future_5_run_vcf_transform
//! ```

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::conversation::{Message, Role};
use crate::engine::{FutureId, FutureState};
use crate::registry::BoundArguments;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "kebab-case")]
pub enum AbortReason {
    TokenBudget,
    UnrecoverableDispatch,
    DispatchLimit,
    Backend(String),
    EmptyRegistry,
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TokenBudget => f.write_str("token-budget"),
            Self::UnrecoverableDispatch => f.write_str("unrecoverable-dispatch"),
            Self::DispatchLimit => f.write_str("dispatch-limit"),
            Self::Backend(message) => write!(f, "backend: {message}"),
            Self::EmptyRegistry => f.write_str("empty-registry"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptEvent {
    Dispatch {
        function: String,
        arguments: BoundArguments,
        future_id: FutureId,
        /// Future state observed when scheduling returned.
        state: FutureState,
    },
    ErrorForwarded {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        function: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arguments: Option<String>,
        error: String,
    },
    Done {
        content: String,
    },
    Aborted {
        reason: AbortReason,
    },
}

impl TranscriptEvent {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Self::Done { .. } | Self::Aborted { .. })
    }

    /// Text block for this event in the console layout.
    pub fn render(&self) -> String {
        match self {
            Self::Dispatch {
                function,
                arguments,
                future_id,
                state,
            } => format!(
                "Function Calling\nFunction Name:  {function}\nFunction Args:  {}\n\
                 <AppFuture {future_id} state={state}>\n\n\
                 Task scheduled with AppFuture id: {future_id}\n\n",
                arguments.python_repr()
            ),
            Self::ErrorForwarded {
                function,
                arguments,
                error,
            } => {
                let mut out = String::new();
                if let Some(function) = function {
                    out.push_str(&format!(
                        "Function Calling\nFunction Name:  {function}\nFunction Args:  {}\n\n",
                        arguments.as_deref().unwrap_or("")
                    ));
                }
                out.push_str(&format!("Error forwarded: {error}\n\n"));
                out
            }
            Self::Done { .. } => "DONE\n".to_string(),
            Self::Aborted { reason } => format!("ABORTED: {reason}\n"),
        }
    }
}

/// Header block showing the preamble and the user instruction.
pub fn render_header(preamble: &str, instruction: &str) -> String {
    let mut out = String::from("Context:\n");
    for line in preamble.lines() {
        out.push_str("    ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("\nUser: \n");
    out.push_str(instruction);
    out.push_str("\n\n");
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub events: Vec<TranscriptEvent>,
    pub messages: Vec<Message>,
}

impl Transcript {
    fn message_with_role(&self, role: Role) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == role)
            .map_or("", |m| m.content.as_str())
    }

    pub fn preamble(&self) -> &str {
        self.message_with_role(Role::System)
    }

    pub fn instruction(&self) -> &str {
        self.message_with_role(Role::User)
    }

    pub fn terminal(&self) -> Option<&TranscriptEvent> {
        self.events.last().filter(|e| e.is_terminal())
    }

    pub fn is_done(&self) -> bool {
        matches!(self.terminal(), Some(TranscriptEvent::Done { .. }))
    }

    pub fn abort_reason(&self) -> Option<&AbortReason> {
        match self.terminal() {
            Some(TranscriptEvent::Aborted { reason }) => Some(reason),
            _ => None,
        }
    }

    /// `(function, future id)` of every dispatch, in order.
    pub fn dispatches(&self) -> Vec<(&str, &FutureId)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TranscriptEvent::Dispatch {
                    function, future_id, ..
                } => Some((function.as_str(), future_id)),
                _ => None,
            })
            .collect()
    }

    pub fn forwarded_errors(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TranscriptEvent::ErrorForwarded { .. }))
            .count()
    }

    /// Full console rendering: header followed by every event block.
    pub fn render(&self) -> String {
        let mut out = render_header(self.preamble(), self.instruction());
        for event in &self.events {
            out.push_str(&event.render());
        }
        out
    }

    /// One JSON object per line, one line per event.
    pub fn to_event_log(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
            .collect()
    }
}

/// Replaces run ids and RFC 3339 timestamps with fixed tokens so that the
/// output of two runs can be compared byte for byte.
pub fn normalize_output(text: &str) -> String {
    static RUN_ID: OnceLock<Regex> = OnceLock::new();
    static TIMESTAMP: OnceLock<Regex> = OnceLock::new();
    let run_id = RUN_ID.get_or_init(|| Regex::new(r"run-\d{8}T\d{9}-\d+-\d+").expect("valid regex"));
    let timestamp = TIMESTAMP.get_or_init(|| {
        Regex::new(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(\.\d+)?(Z|[+-]\d{2}:\d{2})?").expect("valid regex")
    });
    let text = run_id.replace_all(text, "<run-id>");
    timestamp.replace_all(&text, "<timestamp>").into_owned()
}
