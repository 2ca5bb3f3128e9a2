//! Graph view of a run: one node per future and per plan step.

use std::collections::BTreeMap;
use std::path::PathBuf;

use fcflow_core::agents::{Plan, ReportEntry, StepBinding};
use serde::{Deserialize, Serialize};

use crate::runs::{RunEvent, RunHandle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DagNode {
    Future {
        id: String,
        task: String,
        state: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exit_code: Option<i32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stdout: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stderr: Option<PathBuf>,
        #[serde(default)]
        outputs: BTreeMap<String, Vec<PathBuf>>,
    },
    Step {
        id: String,
        index: usize,
        task: String,
        /// `waiting`, `running`, `ok` or `failed`.
        state: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        futures: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagEdge {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dag {
    pub nodes: Vec<DagNode>,
    pub edges: Vec<DagEdge>,
}

fn step_id(index: usize) -> String {
    format!("step-{index}")
}

impl Dag {
    pub fn build(handle: &RunHandle) -> Self {
        let mut dag = Dag::default();
        if let Some(engine) = handle.engine() {
            for future in engine.futures() {
                for upstream in future.upstream.values() {
                    dag.edges.push(DagEdge {
                        from: upstream.to_string(),
                        to: future.id.to_string(),
                    });
                }
                let record = future.record.as_ref();
                dag.nodes.push(DagNode::Future {
                    id: future.id.to_string(),
                    task: future.task.clone(),
                    state: future.state.to_string(),
                    exit_code: record.map(|r| r.exit_code),
                    stdout: record.map(|r| r.stdout_path.clone()),
                    stderr: record.map(|r| r.stderr_path.clone()),
                    outputs: record.map(|r| r.produced_outputs.clone()).unwrap_or_default(),
                });
            }
        }

        let mut plan: Option<Plan> = None;
        let mut states: BTreeMap<usize, &'static str> = BTreeMap::new();
        let mut futures: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for event in handle.events() {
            match event.event {
                RunEvent::PlanReady { plan: p } | RunEvent::Plan(ReportEntry::PlanModified { plan: p }) => {
                    plan = Some(p);
                }
                RunEvent::Plan(ReportEntry::Dispatched { step, future_id, .. }) => {
                    states.insert(step, "running");
                    futures.entry(step).or_default().push(future_id.to_string());
                }
                RunEvent::Plan(ReportEntry::Outcome(outcome)) => {
                    states.insert(outcome.step_index, if outcome.is_ok() { "ok" } else { "failed" });
                }
                RunEvent::Plan(ReportEntry::Remediation { step, .. }) => {
                    states.insert(step, "waiting");
                }
                _ => {}
            }
        }
        if let Some(plan) = plan {
            for step in &plan.steps {
                if let StepBinding::After(refs) = &step.binding {
                    for target in refs.values() {
                        dag.edges.push(DagEdge {
                            from: step_id(*target),
                            to: step_id(step.index),
                        });
                    }
                }
                dag.nodes.push(DagNode::Step {
                    id: step_id(step.index),
                    index: step.index,
                    task: step.task.clone(),
                    state: states.get(&step.index).copied().unwrap_or("waiting").to_string(),
                    futures: futures.remove(&step.index).unwrap_or_default(),
                });
            }
        }
        dag
    }
}
