//! Typed model of the supported BPMN 2.0 subset.
//!
//! Supported: pools/lanes, start and end events, tasks, parallel and
//! exclusive gateways, intermediate message catch/throw events, sequence
//! flows (optionally guarded), message flows, data objects and data
//! input/output associations, task documentation.

mod graph;
pub mod guard;
mod validate;
mod xml;

pub use graph::{to_flow_graph, FlowGraph, GraphEdge, GraphNode, LaneGraph, MessageEdge};
pub use guard::{eval_guard, parse_guard, CmpOp, DataContext, GuardError, GuardExpr, Literal};
pub use validate::{validate_model, Diagnostic, Severity};
pub use xml::{parse_bpmn, to_bpmn_xml, ParseError};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BpmnModel {
    pub pools: Vec<Pool>,
    pub message_flows: Vec<MessageFlow>,
    pub data_objects: Vec<DataObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Pool {
    pub id: String,
    pub name: String,
    /// Id of the `<process>` element backing this pool.
    pub process_id: String,
    pub lanes: Vec<Lane>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Lane {
    pub id: String,
    pub name: String,
    pub nodes: Vec<FlowNode>,
    pub flows: Vec<SequenceFlow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum NodeKind {
    StartEvent,
    EndEvent,
    Task,
    ParallelGateway,
    ExclusiveGateway,
    MessageCatch,
    MessageThrow,
}

impl NodeKind {
    pub fn is_gateway(self) -> bool {
        matches!(self, NodeKind::ParallelGateway | NodeKind::ExclusiveGateway)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FlowNode {
    pub id: String,
    pub kind: NodeKind,
    pub name: String,
    pub documentation: String,
    pub data_inputs: Vec<String>,
    pub data_outputs: Vec<String>,
}

impl FlowNode {
    /// Display name: the `name` attribute, falling back to the id.
    pub fn label(&self) -> &str {
        if self.name.is_empty() {
            &self.id
        } else {
            &self.name
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SequenceFlow {
    pub id: String,
    pub source: String,
    pub target: String,
    pub guard: Option<GuardExpr>,
    pub is_default: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DataObject {
    pub id: String,
    pub name: String,
    pub schema_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MessageFlow {
    pub id: String,
    pub source_node: String,
    pub target_node: String,
    pub carries: Option<String>,
}

impl BpmnModel {
    pub fn lanes(&self) -> impl Iterator<Item = &Lane> {
        self.pools.iter().flat_map(|p| p.lanes.iter())
    }

    pub fn nodes(&self) -> impl Iterator<Item = &FlowNode> {
        self.lanes().flat_map(|l| l.nodes.iter())
    }

    pub fn node(&self, id: &str) -> Option<&FlowNode> {
        self.nodes().find(|n| n.id == id)
    }

    /// Lane id owning the node.
    pub fn lane_of(&self, node_id: &str) -> Option<&str> {
        self.lanes()
            .find(|l| l.nodes.iter().any(|n| n.id == node_id))
            .map(|l| l.id.as_str())
    }

    pub fn data_object(&self, id: &str) -> Option<&DataObject> {
        self.data_objects.iter().find(|d| d.id == id)
    }

    pub fn data_object_name(&self, id: &str) -> Option<&str> {
        self.data_object(id).map(|d| d.name.as_str())
    }

    pub fn flow_count(&self) -> usize {
        self.lanes().map(|l| l.flows.len()).sum()
    }

    pub fn data_association_count(&self) -> usize {
        self.nodes().map(|n| n.data_inputs.len() + n.data_outputs.len()).sum()
    }

    /// Canonical JSON encoding of the model.
    pub fn to_canonical_json(&self) -> String {
        crate::canonical::to_string(self)
    }
}
