//! Trade-transaction scopes over SESE regions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::sese::{Region, RegionTree};
use crate::bpmn::{BpmnModel, NodeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ScopeKind {
    Top,
    Nested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransactionScope {
    pub id: String,
    pub kind: ScopeKind,
    pub region: String,
    pub parent: Option<String>,
    pub participating_lanes: Vec<String>,
    /// Flow whose traversal opens the scope. Top scopes open at the start
    /// event and have none.
    pub entry_edge: Option<String>,
    /// Flow whose traversal commits the scope; top scopes commit at an end
    /// event.
    pub exit_edge: Option<String>,
    pub nodes: Vec<String>,
}

impl TransactionScope {
    pub fn contains(&self, node: &str) -> bool {
        self.nodes.iter().any(|n| n == node)
    }
}

/// A region qualifies as a nested scope when it holds at least two tasks that
/// together read or write at least two distinct data objects.
pub fn identify_scopes(regions: &BTreeMap<String, RegionTree>, model: &BpmnModel) -> Vec<TransactionScope> {
    let mut out = Vec::new();
    for (lane, tree) in regions {
        out.push(TransactionScope {
            id: lane.clone(),
            kind: ScopeKind::Top,
            region: tree.root.id.clone(),
            parent: None,
            participating_lanes: vec![lane.clone()],
            entry_edge: None,
            exit_edge: None,
            nodes: tree.root.nodes.clone(),
        });
        for child in &tree.root.children {
            nested(model, lane, child, lane, &mut out);
        }
    }
    out
}

fn nested(model: &BpmnModel, lane: &str, region: &Region, parent: &str, out: &mut Vec<TransactionScope>) {
    let tasks: Vec<_> = region
        .nodes
        .iter()
        .filter_map(|n| model.node(n))
        .filter(|n| n.kind == NodeKind::Task)
        .collect();
    let objects: BTreeSet<&str> = tasks
        .iter()
        .flat_map(|t| t.data_inputs.iter().chain(&t.data_outputs))
        .map(String::as_str)
        .collect();
    let qualifies = tasks.len() >= 2 && objects.len() >= 2;
    if qualifies {
        out.push(TransactionScope {
            id: region.id.clone(),
            kind: ScopeKind::Nested,
            region: region.id.clone(),
            parent: Some(parent.to_string()),
            participating_lanes: vec![lane.to_string()],
            entry_edge: region.entry_edge.clone(),
            exit_edge: region.exit_edge.clone(),
            nodes: region.nodes.clone(),
        });
    }
    let next_parent = if qualifies { region.id.as_str() } else { parent };
    for child in &region.children {
        nested(model, lane, child, next_parent, out);
    }
}
