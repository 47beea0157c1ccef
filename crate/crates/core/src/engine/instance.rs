//! Per-instance state held by the monitor.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::network::{DeEvent, NetworkState};
use crate::compiler::{MonitorProgram, TransactionScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceStatus {
    Running,
    Completed,
    Aborted,
    Faulted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ScopeState {
    Active,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskState {
    Pending,
    Done,
    Cancelled,
}

impl TaskState {
    pub fn is_live(self) -> bool {
        matches!(self, TaskState::Pending)
    }
}

/// One attested version of a data object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DataEntry {
    pub cid: String,
    pub metadata: Map<String, Value>,
    pub version: u64,
    pub author: String,
    pub signature: String,
    pub attestation_tx_id: String,
    pub task_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskInput {
    pub name: String,
    /// Absent when no version of the object has been attested yet.
    pub cid: Option<String>,
    pub version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskOutput {
    pub name: String,
    /// Version an output submitted now would receive, and must sign.
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskRequest {
    pub instance_id: String,
    pub task_id: String,
    pub task_name: String,
    pub lane: String,
    pub machine: String,
    pub purpose: String,
    pub inputs: Vec<TaskInput>,
    pub outputs: Vec<TaskOutput>,
    pub callback_token: String,
    pub state: TaskState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProcessedEvent {
    pub seq: u64,
    pub name: String,
    pub consumers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Consumption {
    pub event: String,
    pub machine: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Instance {
    pub instance_id: String,
    pub program_id: String,
    pub actor_bindings: BTreeMap<String, String>,
    pub creator: String,
    pub status: InstanceStatus,
    pub network: NetworkState,
    /// Every attested version per data object name, oldest first.
    pub data: BTreeMap<String, Vec<DataEntry>>,
    pub scopes: BTreeMap<String, ScopeState>,
    pub tasks: BTreeMap<String, TaskRequest>,
    pub processed: Vec<ProcessedEvent>,
    pub consumption: Vec<Consumption>,
    pub fault: Option<String>,
}

impl Instance {
    pub fn latest(&self, name: &str) -> Option<&DataEntry> {
        self.data.get(name).and_then(|v| v.last())
    }

    pub fn next_version(&self, name: &str) -> u64 {
        self.data.get(name).map_or(0, |v| v.len() as u64)
    }

    pub fn machine_states(&self) -> &BTreeMap<String, String> {
        &self.network.states
    }

    pub fn event_queue(&self) -> &[DeEvent] {
        &self.network.queue
    }

    /// Latest metadata per data object, for guard evaluation.
    pub fn guard_context(&self) -> BTreeMap<String, Map<String, Value>> {
        self.data
            .iter()
            .filter_map(|(k, v)| v.last().map(|e| (k.clone(), e.metadata.clone())))
            .collect()
    }

    /// Live tasks ordered by task id, with output versions as of now.
    pub fn pending_tasks(&self) -> Vec<TaskRequest> {
        self.tasks
            .values()
            .filter(|t| t.state.is_live())
            .map(|t| {
                let mut t = t.clone();
                for o in &mut t.outputs {
                    o.version = self.next_version(&o.name);
                }
                t
            })
            .collect()
    }

    /// Canonical view of the instance without callback tokens.
    pub fn snapshot(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("instance serializes");
        if let Some(tasks) = v.get_mut("tasks").and_then(Value::as_object_mut) {
            for t in tasks.values_mut() {
                if let Some(t) = t.as_object_mut() {
                    t.remove("callbackToken");
                }
            }
        }
        v
    }

    /// Times each event name was consumed by a transition.
    pub fn consumption_counts(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for c in &self.consumption {
            *out.entry(c.event.as_str()).or_insert(0) += 1;
        }
        out
    }
}

/// Sub-machines spawned inside the scope's region. A branch machine belongs
/// to the scope when every node it visits lies in the scope; a branch with
/// no nodes follows its siblings.
pub fn machines_inside(program: &MonitorProgram, scope: &TransactionScope) -> BTreeSet<String> {
    let mut inside = BTreeSet::new();
    let mut regions_inside = BTreeSet::new();
    let mut empty = Vec::new();
    for m in program.network.machines.iter().filter(|m| m.parent.is_some()) {
        let nodes: Vec<&str> = m
            .states
            .iter()
            .filter_map(|s| s.strip_prefix("n:").or_else(|| s.strip_prefix("recv:")))
            .collect();
        if nodes.is_empty() {
            empty.push(m);
        } else if nodes.iter().all(|n| scope.contains(n)) {
            inside.insert(m.id.clone());
            regions_inside.extend(m.region.clone());
        }
    }
    for m in empty {
        if m.region
            .as_ref()
            .is_some_and(|r| regions_inside.contains(r) || *r == scope.region)
        {
            inside.insert(m.id.clone());
        }
    }
    inside
}

/// Machine whose transition opens the scope.
pub fn enclosing_machine<'p>(program: &'p MonitorProgram, scope: &str) -> Option<&'p str> {
    use crate::compiler::Action;
    program.network.machines.iter().find_map(|m| {
        m.transitions
            .iter()
            .any(|t| {
                t.actions
                    .iter()
                    .any(|a| matches!(a, Action::OpenScope { scope: s } if s == scope))
            })
            .then_some(m.id.as_str())
    })
}
