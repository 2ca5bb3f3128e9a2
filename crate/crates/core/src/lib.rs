//! Orchestration of multi-step workflows driven by an LLM
//! function-calling loop.
//!
//! A [`registry::Registry`] is loaded from a declarative task manifest and
//! advertises two functions per task: one taking physical file paths and one
//! taking the ids of previously scheduled futures. The [`engine::Engine`]
//! schedules task commands as futures, the [`conversation`] module drives the
//! function-calling loop against a [`backend::Backend`], and [`agents`] layers
//! planning, outcome checking, debugging and human escalation on top.

pub mod agents;
pub mod backend;
pub mod conversation;
pub mod engine;
pub mod registry;
pub mod transcript;

mod serde_util;

pub use backend::{Backend, BackendError, BackendRequest, BackendResponse};
pub use conversation::{ConversationState, Message, Role};
pub use engine::{Engine, EngineConfig, FutureId, FutureState};
pub use registry::{FunctionDescriptor, Registry, TaskDefinition};
pub use transcript::{Transcript, TranscriptEvent};

const PREAMBLE_ASSET: &str = include_str!("../assets/preamble.txt");

/// Default system preamble sent ahead of every instruction.
pub fn default_preamble() -> &'static str {
    PREAMBLE_ASSET.trim_end()
}
