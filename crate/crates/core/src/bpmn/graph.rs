use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BpmnModel, GuardExpr, NodeKind};
use crate::digraph::Digraph;

/// Per-lane directed graphs plus the cross-lane message edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FlowGraph {
    pub lanes: BTreeMap<String, LaneGraph>,
    pub message_edges: Vec<MessageEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LaneGraph {
    pub lane_id: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GraphEdge {
    pub id: String,
    pub source: String,
    pub target: String,
    pub guard: Option<GuardExpr>,
    pub is_default: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageEdge {
    pub id: String,
    pub source: String,
    pub target: String,
    /// Data object *name* carried by the message, if any.
    pub carries: Option<String>,
}

impl LaneGraph {
    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn edge_index(&self, id: &str) -> Option<usize> {
        self.edges.iter().position(|e| e.id == id)
    }

    pub fn kind(&self, id: &str) -> Option<NodeKind> {
        self.node_index(id).map(|i| self.nodes[i].kind)
    }

    /// Node-level digraph in node-index space.
    pub fn digraph(&self) -> Digraph {
        let mut g = Digraph::new(self.nodes.len());
        for e in &self.edges {
            if let (Some(s), Some(t)) = (self.node_index(&e.source), self.node_index(&e.target)) {
                g.add_edge(s, t);
            }
        }
        g
    }

    pub fn start(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.kind == NodeKind::StartEvent)
    }

    pub fn outgoing(&self, node: &str) -> impl Iterator<Item = (usize, &GraphEdge)> + '_ {
        let node = node.to_string();
        self.edges.iter().enumerate().filter(move |(_, e)| e.source == node)
    }

    pub fn incoming(&self, node: &str) -> impl Iterator<Item = (usize, &GraphEdge)> + '_ {
        let node = node.to_string();
        self.edges.iter().enumerate().filter(move |(_, e)| e.target == node)
    }
}

/// Build the flow graph of a validated model. Every node and flow id is
/// preserved; lanes are keyed (and therefore ordered) by lane id.
pub fn to_flow_graph(model: &BpmnModel) -> FlowGraph {
    let lanes = model
        .lanes()
        .map(|lane| {
            let graph = LaneGraph {
                lane_id: lane.id.clone(),
                nodes: lane
                    .nodes
                    .iter()
                    .map(|n| GraphNode {
                        id: n.id.clone(),
                        kind: n.kind,
                        name: n.label().to_string(),
                    })
                    .collect(),
                edges: lane
                    .flows
                    .iter()
                    .map(|f| GraphEdge {
                        id: f.id.clone(),
                        source: f.source.clone(),
                        target: f.target.clone(),
                        guard: f.guard.clone(),
                        is_default: f.is_default,
                    })
                    .collect(),
            };
            (lane.id.clone(), graph)
        })
        .collect();
    let message_edges = model
        .message_flows
        .iter()
        .map(|mf| MessageEdge {
            id: mf.id.clone(),
            source: mf.source_node.clone(),
            target: mf.target_node.clone(),
            carries: mf
                .carries
                .as_deref()
                .and_then(|c| model.data_object_name(c))
                .map(str::to_string),
        })
        .collect();
    FlowGraph { lanes, message_edges }
}
