//! Blocking requests for a human decision.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum HumanDecision {
    ApproveRetry,
    /// New file bindings for the failed step.
    ProvideBinding { values: IndexMap<String, String> },
    Abort {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

/// An open question waiting for [`PendingEscalation::answer`].
#[derive(Debug)]
pub struct PendingEscalation {
    pub id: String,
    pub step: usize,
    pub task: String,
    pub question: String,
    reply: oneshot::Sender<HumanDecision>,
}

impl PendingEscalation {
    /// Delivers the decision. Returns it back if the plan stopped waiting.
    pub fn answer(self, decision: HumanDecision) -> Result<(), HumanDecision> {
        self.reply.send(decision)
    }
}

/// Sending half held by plan executors.
#[derive(Debug, Clone)]
pub struct EscalationChannel {
    tx: mpsc::UnboundedSender<PendingEscalation>,
}

pub type EscalationReceiver = mpsc::UnboundedReceiver<PendingEscalation>;

pub fn escalation_channel() -> (EscalationChannel, EscalationReceiver) {
    let (tx, rx) = mpsc::unbounded_channel();
    (EscalationChannel { tx }, rx)
}

impl EscalationChannel {
    /// A channel whose receiver is already gone; every escalation aborts.
    pub fn closed() -> Self {
        escalation_channel().0
    }

    /// Blocks the calling task until a human answers. A closed channel, or an
    /// escalation dropped unanswered, yields an abort decision.
    pub async fn escalate(&self, id: &str, step: usize, task: &str, question: &str) -> HumanDecision {
        let (reply, rx) = oneshot::channel();
        let pending = PendingEscalation {
            id: id.to_string(),
            step,
            task: task.to_string(),
            question: question.to_string(),
            reply,
        };
        let closed = || HumanDecision::Abort {
            reason: Some("escalation channel closed".into()),
        };
        if self.tx.send(pending).is_err() {
            return closed();
        }
        rx.await.unwrap_or_else(|_| closed())
    }
}
