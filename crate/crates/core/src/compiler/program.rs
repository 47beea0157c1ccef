//! The deployable monitor program and its canonical encoding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::flatten::FsmNetwork;
use super::scopes::TransactionScope;
use super::CompileError;
use crate::bpmn::{BpmnModel, NodeKind};
use crate::{canonical, crypto};

pub const PROGRAM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct MonitorProgram {
    /// Lane ids; one actor key is bound per lane.
    pub actors: Vec<String>,
    /// Task id to its data flow.
    pub dataflow: BTreeMap<String, TaskFlow>,
    pub network: FsmNetwork,
    pub scopes: Vec<TransactionScope>,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskFlow {
    pub lane: String,
    pub name: String,
    pub purpose: String,
    /// Data object names read by the task.
    pub inputs: Vec<String>,
    /// Data object names the task must produce.
    pub outputs: Vec<String>,
}

impl MonitorProgram {
    /// Canonical JSON bytes; the program id is computed over exactly these.
    pub fn to_bytes(&self) -> Vec<u8> {
        canonical::to_vec(self)
    }

    pub fn program_id(&self) -> String {
        crypto::cid_of(&self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MonitorProgram, CompileError> {
        let p: MonitorProgram = serde_json::from_slice(bytes).map_err(|e| CompileError::BadProgram(e.to_string()))?;
        p.check()?;
        Ok(p)
    }

    /// Structural consistency of a program read from outside.
    pub fn check(&self) -> Result<(), CompileError> {
        let bad = |m: String| Err(CompileError::BadProgram(m));
        if self.version != PROGRAM_VERSION {
            return bad(format!("unsupported program version {}", self.version));
        }
        for (task, flow) in &self.dataflow {
            if !self.actors.contains(&flow.lane) {
                return bad(format!("task {task} belongs to unknown actor {}", flow.lane));
            }
        }
        for m in &self.network.machines {
            if !self.actors.contains(&m.lane) {
                return bad(format!("machine {} belongs to unknown actor {}", m.id, m.lane));
            }
            if !m.states.contains(&m.initial) {
                return bad(format!("machine {} has unknown initial state", m.id));
            }
        }
        for s in &self.scopes {
            if !self.actors.iter().any(|a| s.participating_lanes.contains(a)) {
                return bad(format!("scope {} has no known participant", s.id));
            }
        }
        Ok(())
    }

    pub fn task_flow(&self, task: &str) -> Option<&TaskFlow> {
        self.dataflow.get(task)
    }

    pub fn scope(&self, id: &str) -> Option<&TransactionScope> {
        self.scopes.iter().find(|s| s.id == id)
    }
}

/// Per-task inputs and outputs by data object name, plus lane and purpose.
pub fn dataflow_of(model: &BpmnModel) -> Result<BTreeMap<String, TaskFlow>, CompileError> {
    let name = |id: &String| {
        model
            .data_object_name(id)
            .map(str::to_string)
            .ok_or_else(|| CompileError::Internal(format!("unknown data object {id}")))
    };
    let mut out = BTreeMap::new();
    for lane in model.lanes() {
        for n in lane.nodes.iter().filter(|n| n.kind == NodeKind::Task) {
            out.insert(
                n.id.clone(),
                TaskFlow {
                    lane: lane.id.clone(),
                    name: n.label().to_string(),
                    purpose: n.documentation.clone(),
                    inputs: n.data_inputs.iter().map(name).collect::<Result<_, _>>()?,
                    outputs: n.data_outputs.iter().map(name).collect::<Result<_, _>>()?,
                },
            );
        }
    }
    Ok(out)
}

pub fn emit_program(
    network: FsmNetwork,
    scopes: Vec<TransactionScope>,
    dataflow: BTreeMap<String, TaskFlow>,
    actors: Vec<String>,
) -> MonitorProgram {
    MonitorProgram {
        actors,
        dataflow,
        network,
        scopes,
        version: PROGRAM_VERSION,
    }
}
