use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BpmnModel, Lane, NodeKind};
use crate::digraph::Digraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Diagnostic {
    pub severity: Severity,
    /// Stable machine-readable code, e.g. `UnbalancedParallelGateway`.
    pub code: String,
    pub node: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        match &self.node {
            Some(n) => write!(f, "{sev}[{}] {n}: {}", self.code, self.message),
            None => write!(f, "{sev}[{}] {}", self.code, self.message),
        }
    }
}

#[derive(Default)]
struct Sink(Vec<Diagnostic>);

impl Sink {
    fn error(&mut self, code: &str, node: Option<&str>, message: impl Into<String>) {
        self.0.push(Diagnostic {
            severity: Severity::Error,
            code: code.to_string(),
            node: node.map(str::to_string),
            message: message.into(),
        });
    }
}

/// Check every model invariant. An empty result means the model can be
/// compiled.
pub fn validate_model(m: &BpmnModel) -> Vec<Diagnostic> {
    let mut d = Sink::default();
    if m.lanes().next().is_none() {
        d.error("EmptyModel", None, "model has no process lanes");
        return d.0;
    }
    check_ids(m, &mut d);
    check_data(m, &mut d);
    for lane in m.lanes() {
        check_lane(m, lane, &mut d);
    }
    check_message_flows(m, &mut d);
    d.0
}

fn check_ids(m: &BpmnModel, d: &mut Sink) {
    let mut seen = BTreeSet::new();
    for n in m.nodes() {
        if !seen.insert(n.id.as_str()) {
            d.error("DuplicateId", Some(&n.id), "flow node id is not unique");
        }
    }
    let mut flows = BTreeSet::new();
    for f in m.lanes().flat_map(|l| l.flows.iter()) {
        if !flows.insert(f.id.as_str()) {
            d.error("DuplicateId", Some(&f.id), "sequence flow id is not unique");
        }
    }
    for mf in &m.message_flows {
        if !flows.insert(mf.id.as_str()) {
            d.error("DuplicateId", Some(&mf.id), "message flow id is not unique");
        }
    }
    let mut lanes = BTreeSet::new();
    for l in m.lanes() {
        if !lanes.insert(l.id.as_str()) {
            d.error("DuplicateId", Some(&l.id), "lane id is not unique");
        }
    }
}

fn check_data(m: &BpmnModel, d: &mut Sink) {
    let mut names = BTreeSet::new();
    for o in &m.data_objects {
        if !names.insert(o.name.as_str()) {
            d.error(
                "DuplicateDataObjectName",
                None,
                format!("data object name {} is not unique", o.name),
            );
        }
    }
    let produced: BTreeSet<&str> = m
        .nodes()
        .flat_map(|n| n.data_outputs.iter().map(String::as_str))
        .collect();
    for n in m.nodes() {
        let has_assoc = !n.data_inputs.is_empty() || !n.data_outputs.is_empty();
        if has_assoc && n.kind.is_gateway() {
            d.error(
                "GatewayDataAssociation",
                Some(&n.id),
                "gateways cannot have data associations",
            );
        } else if has_assoc && n.kind != NodeKind::Task {
            d.error(
                "DataAssociationOutsideTask",
                Some(&n.id),
                "only tasks can have data associations",
            );
        }
        for r in n.data_inputs.iter().chain(&n.data_outputs) {
            if m.data_object(r).is_none() {
                d.error(
                    "DanglingDataAssociation",
                    Some(&n.id),
                    format!("unknown data object {r}"),
                );
            }
        }
        for r in &n.data_inputs {
            if m.data_object(r).is_some() && !produced.contains(r.as_str()) {
                d.error(
                    "UnproducedInput",
                    Some(&n.id),
                    format!(
                        "input {} is not the output of any task",
                        m.data_object_name(r).unwrap_or(r)
                    ),
                );
            }
        }
    }
}

fn check_message_flows(m: &BpmnModel, d: &mut Sink) {
    for mf in &m.message_flows {
        let (Some(src), Some(dst)) = (m.node(&mf.source_node), m.node(&mf.target_node)) else {
            d.error(
                "DanglingReference",
                Some(&mf.id),
                "message flow endpoint does not exist",
            );
            continue;
        };
        if m.lane_of(&src.id) == m.lane_of(&dst.id) {
            d.error("MessageFlowSameLane", Some(&mf.id), "message flow must cross lanes");
        }
        if !matches!(src.kind, NodeKind::Task | NodeKind::MessageThrow) {
            d.error(
                "MessageFlowEndpoint",
                Some(&mf.id),
                format!("source {} is not a task or message throw event", src.id),
            );
        }
        if !matches!(dst.kind, NodeKind::Task | NodeKind::MessageCatch) {
            d.error(
                "MessageFlowEndpoint",
                Some(&mf.id),
                format!("target {} is not a task or message catch event", dst.id),
            );
        }
        if let Some(c) = &mf.carries {
            if m.data_object(c).is_none() {
                d.error(
                    "DanglingReference",
                    Some(&mf.id),
                    format!("carries unknown data object {c}"),
                );
            }
        }
    }
    for n in m.nodes() {
        let connected = match n.kind {
            NodeKind::MessageCatch => m.message_flows.iter().any(|mf| mf.target_node == n.id),
            NodeKind::MessageThrow => m.message_flows.iter().any(|mf| mf.source_node == n.id),
            _ => true,
        };
        if !connected {
            d.error(
                "UnconnectedMessageEvent",
                Some(&n.id),
                "message event has no message flow",
            );
        }
    }
}

fn check_lane(m: &BpmnModel, lane: &Lane, d: &mut Sink) {
    let index: HashMap<&str, usize> = lane.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut g = Digraph::new(lane.nodes.len());
    for f in &lane.flows {
        match (index.get(f.source.as_str()), index.get(f.target.as_str())) {
            (Some(&s), Some(&t)) => g.add_edge(s, t),
            _ if m.node(&f.target).is_some() => {
                d.error(
                    "CrossLaneSequenceFlow",
                    Some(&f.id),
                    format!("sequence flow leaves lane {}", lane.id),
                );
            }
            _ => d.error(
                "DanglingReference",
                Some(&f.id),
                "sequence flow endpoint does not exist",
            ),
        }
    }

    let starts: Vec<usize> = (0..lane.nodes.len())
        .filter(|&i| lane.nodes[i].kind == NodeKind::StartEvent)
        .collect();
    if starts.len() != 1 {
        d.error(
            "StartEventCount",
            None,
            format!(
                "lane {} has {} start events, expected exactly one",
                lane.id,
                starts.len()
            ),
        );
    }
    if !lane.nodes.iter().any(|n| n.kind == NodeKind::EndEvent) {
        d.error("MissingEndEvent", None, format!("lane {} has no end event", lane.id));
    }

    // Degree rules.
    for (i, n) in lane.nodes.iter().enumerate() {
        let (ins, outs) = (g.pred[i].len(), g.succ[i].len());
        let ok = match n.kind {
            NodeKind::StartEvent => ins == 0 && outs == 1,
            NodeKind::EndEvent => ins >= 1 && outs == 0,
            NodeKind::Task | NodeKind::MessageCatch | NodeKind::MessageThrow => ins == 1 && outs == 1,
            NodeKind::ParallelGateway | NodeKind::ExclusiveGateway => {
                (ins == 1 && outs >= 2) || (ins >= 2 && outs == 1)
            }
        };
        if !ok {
            let code = match n.kind {
                NodeKind::ParallelGateway => "ParallelGatewayShape",
                NodeKind::ExclusiveGateway => "ExclusiveGatewayShape",
                _ => "NodeArity",
            };
            d.error(code, Some(&n.id), format!("{ins} incoming and {outs} outgoing flows"));
        }
    }

    // Guards and default flows.
    let known_objects: BTreeSet<&str> = m.data_objects.iter().map(|o| o.name.as_str()).collect();
    let mut defaults: BTreeMap<&str, usize> = BTreeMap::new();
    for f in &lane.flows {
        let Some(&s) = index.get(f.source.as_str()) else {
            continue;
        };
        let xor_split = lane.nodes[s].kind == NodeKind::ExclusiveGateway && g.succ[s].len() >= 2;
        if f.guard.is_some() && !xor_split {
            d.error(
                "GuardOutsideXor",
                Some(&f.id),
                "guards are only allowed on flows leaving an exclusive split",
            );
        }
        if f.is_default {
            if !xor_split {
                d.error(
                    "DefaultOutsideXor",
                    Some(&f.id),
                    "default flows must leave an exclusive split",
                );
            }
            if f.guard.is_some() {
                d.error("GuardOnDefault", Some(&f.id), "a default flow cannot carry a guard");
            }
            *defaults.entry(f.source.as_str()).or_default() += 1;
        }
        if xor_split && !f.is_default && f.guard.is_none() {
            d.error(
                "MissingGuard",
                Some(&f.id),
                "non-default flow leaving an exclusive split needs a guard",
            );
        }
        if let Some(guard) = &f.guard {
            for obj in guard.referenced_objects() {
                if !known_objects.contains(obj) {
                    d.error(
                        "UnknownGuardObject",
                        Some(&f.id),
                        format!("guard references unknown data object {obj}"),
                    );
                }
            }
        }
    }
    for (gw, n) in defaults {
        if n > 1 {
            d.error("MultipleDefaults", Some(gw), format!("{n} default flows"));
        }
    }

    let Some(&start) = starts.first() else { return };
    let reach = g.reachable_from(start);
    for (i, n) in lane.nodes.iter().enumerate() {
        if !reach[i] {
            d.error("Unreachable", Some(&n.id), "not reachable from the lane's start event");
        }
    }
    if g.topo_order().is_none() {
        d.error(
            "Cycle",
            None,
            format!("lane {} contains a cycle; loops are not supported", lane.id),
        );
        return;
    }
    if starts.len() != 1 || reach.iter().any(|r| !r) {
        return;
    }
    check_parallel_balance(lane, &g, start, d);
}

/// Every parallel split must be immediately post-dominated by a parallel
/// join that it immediately dominates, and vice versa.
fn check_parallel_balance(lane: &Lane, g: &Digraph, start: usize, d: &mut Sink) {
    let mut with_exit = g.clone();
    let exit = with_exit.add_node();
    for i in 0..lane.nodes.len() {
        if g.succ[i].is_empty() {
            with_exit.add_edge(i, exit);
        }
    }
    let idom = g.idoms(start);
    let ipdom = with_exit.reversed().idoms(exit);
    let is_par = |i: usize| i < lane.nodes.len() && lane.nodes[i].kind == NodeKind::ParallelGateway;
    for (i, n) in lane.nodes.iter().enumerate() {
        if n.kind != NodeKind::ParallelGateway {
            continue;
        }
        if g.succ[i].len() >= 2 {
            let ok = ipdom[i].is_some_and(|j| is_par(j) && g.pred[j].len() >= 2 && idom[j] == Some(i));
            if !ok {
                d.error(
                    "UnbalancedParallelGateway",
                    Some(&n.id),
                    "parallel split has no matching join on all of its branches",
                );
            }
        } else if g.pred[i].len() >= 2 {
            let ok = idom[i].is_some_and(|s| is_par(s) && g.succ[s].len() >= 2 && ipdom[s] == Some(i));
            if !ok {
                d.error(
                    "UnbalancedParallelGateway",
                    Some(&n.id),
                    "parallel join does not close a single parallel split",
                );
            }
        }
    }
}
