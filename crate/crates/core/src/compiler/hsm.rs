//! Hierarchical state machine built from a lane graph and its regions.
//!
//! A lane becomes a `Sequence`: a small DAG over child states (atomic flow
//! nodes and concurrent blocks) and junctions (exclusive gateways), linked by
//! transitions that each correspond to one sequence flow. A parallel
//! split/join pair becomes a `Concurrent` child holding one `Sequence` per
//! outgoing branch.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::sese::RegionTree;
use super::CompileError;
use crate::bpmn::{FlowGraph, GuardExpr, LaneGraph, NodeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeHsm {
    /// Root sequence per lane, keyed by lane id.
    pub lanes: BTreeMap<String, Sequence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum HsmState {
    Atomic(Atomic),
    Sequence(Sequence),
    Concurrent(Concurrent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Atomic {
    pub node: String,
    pub kind: NodeKind,
    pub name: String,
    /// Message flows that must arrive before the node can proceed.
    pub incoming_messages: Vec<String>,
    pub outgoing_messages: Vec<OutMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OutMessage {
    pub flow: String,
    pub carries: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Vertex {
    Child(usize),
    Junction(usize),
    Exit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Junction {
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeqTransition {
    pub from: Vertex,
    pub to: Vertex,
    pub edge: String,
    pub guard: Option<GuardExpr>,
    pub is_default: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Sequence {
    pub id: String,
    /// Flow that enters the sequence; `None` for a lane root, which starts
    /// at the start event.
    pub entry_edge: Option<String>,
    pub entry: Vertex,
    pub children: Vec<HsmState>,
    pub junctions: Vec<Junction>,
    pub transitions: Vec<SeqTransition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Concurrent {
    pub region: String,
    pub split: String,
    pub join: String,
    pub entry_edge: String,
    pub exit_edge: String,
    pub branches: Vec<Sequence>,
}

impl Sequence {
    pub fn outgoing(&self, from: Vertex) -> impl Iterator<Item = &SeqTransition> {
        self.transitions.iter().filter(move |t| t.from == from)
    }
}

impl DeHsm {
    /// Atomic states in preorder.
    pub fn atomics(&self) -> Vec<&Atomic> {
        let mut out = Vec::new();
        for seq in self.lanes.values() {
            collect_atomics(seq, &mut out);
        }
        out
    }

    pub fn concurrent_count(&self) -> usize {
        fn count(seq: &Sequence) -> usize {
            seq.children
                .iter()
                .map(|c| match c {
                    HsmState::Concurrent(k) => 1 + k.branches.iter().map(count).sum::<usize>(),
                    HsmState::Sequence(s) => count(s),
                    HsmState::Atomic(_) => 0,
                })
                .sum()
        }
        self.lanes.values().map(count).sum()
    }
}

fn collect_atomics<'a>(seq: &'a Sequence, out: &mut Vec<&'a Atomic>) {
    for c in &seq.children {
        match c {
            HsmState::Atomic(a) => out.push(a),
            HsmState::Sequence(s) => collect_atomics(s, out),
            HsmState::Concurrent(k) => k.branches.iter().for_each(|b| collect_atomics(b, out)),
        }
    }
}

struct LaneCtx<'a> {
    lane: &'a LaneGraph,
    regions: &'a RegionTree,
    topo: HashMap<usize, usize>,
    incoming_msgs: BTreeMap<&'a str, Vec<String>>,
    outgoing_msgs: BTreeMap<&'a str, Vec<OutMessage>>,
}

/// Build the hierarchical machine of every lane.
pub fn build_hsm(g: &FlowGraph, regions: &BTreeMap<String, RegionTree>) -> Result<DeHsm, CompileError> {
    let mut lanes = BTreeMap::new();
    for (id, lane) in &g.lanes {
        let tree = regions
            .get(id)
            .ok_or_else(|| CompileError::Internal(format!("no regions for lane {id}")))?;
        let order = lane
            .digraph()
            .topo_order()
            .ok_or_else(|| CompileError::Internal(format!("lane {id} is cyclic")))?;
        let mut ctx = LaneCtx {
            lane,
            regions: tree,
            topo: order.iter().enumerate().map(|(pos, &v)| (v, pos)).collect(),
            incoming_msgs: BTreeMap::new(),
            outgoing_msgs: BTreeMap::new(),
        };
        for me in &g.message_edges {
            ctx.incoming_msgs
                .entry(me.target.as_str())
                .or_default()
                .push(me.id.clone());
            ctx.outgoing_msgs
                .entry(me.source.as_str())
                .or_default()
                .push(OutMessage {
                    flow: me.id.clone(),
                    carries: me.carries.clone(),
                });
        }
        let start = lane
            .start()
            .ok_or_else(|| CompileError::Internal(format!("lane {id} has no start event")))?;
        lanes.insert(id.clone(), build_sequence(&ctx, id.clone(), None, start, None)?);
    }
    Ok(DeHsm { lanes })
}

fn build_sequence(
    ctx: &LaneCtx,
    id: String,
    entry_edge: Option<String>,
    first: usize,
    stop: Option<usize>,
) -> Result<Sequence, CompileError> {
    let lane = ctx.lane;
    let g = lane.digraph();

    // Members reachable from `first` without entering `stop`; parallel blocks
    // are skipped over via their join.
    let mut members: Vec<usize> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut stack = vec![first];
    let mut joins: HashMap<usize, usize> = HashMap::new();
    while let Some(v) = stack.pop() {
        if Some(v) == stop || !seen.insert(v) {
            continue;
        }
        members.push(v);
        let node = &lane.nodes[v];
        if node.kind == NodeKind::ParallelGateway && g.succ[v].len() >= 2 {
            let join = join_of(ctx, v)?;
            joins.insert(v, join);
            stack.extend(g.succ[join].iter().copied());
        } else if node.kind == NodeKind::ParallelGateway {
            return Err(CompileError::Internal(format!(
                "parallel join {} reached outside its block",
                node.id
            )));
        } else {
            stack.extend(g.succ[v].iter().copied());
        }
    }
    members.sort_by_key(|v| ctx.topo[v]);

    let mut vertex_of: HashMap<usize, Vertex> = HashMap::new();
    let mut children = Vec::new();
    let mut junctions = Vec::new();
    for &v in &members {
        let node = &lane.nodes[v];
        match node.kind {
            NodeKind::ExclusiveGateway => {
                vertex_of.insert(v, Vertex::Junction(junctions.len()));
                junctions.push(Junction { node: node.id.clone() });
            }
            NodeKind::ParallelGateway => {
                vertex_of.insert(v, Vertex::Child(children.len()));
                children.push(HsmState::Concurrent(build_concurrent(ctx, v, joins[&v])?));
            }
            _ => {
                vertex_of.insert(v, Vertex::Child(children.len()));
                children.push(HsmState::Atomic(Atomic {
                    node: node.id.clone(),
                    kind: node.kind,
                    name: node.name.clone(),
                    incoming_messages: ctx.incoming_msgs.get(node.id.as_str()).cloned().unwrap_or_default(),
                    outgoing_messages: ctx.outgoing_msgs.get(node.id.as_str()).cloned().unwrap_or_default(),
                }));
            }
        }
    }

    let target_vertex = |t: usize| -> Vertex {
        if Some(t) == stop {
            Vertex::Exit
        } else {
            vertex_of[&t]
        }
    };
    let mut transitions = Vec::new();
    for &v in &members {
        let from = vertex_of[&v];
        let source = match joins.get(&v) {
            Some(&join) => join,
            None => v,
        };
        for (_, e) in lane.outgoing(&lane.nodes[source].id) {
            let t = lane.node_index(&e.target).expect("validated edge");
            transitions.push(SeqTransition {
                from,
                to: target_vertex(t),
                edge: e.id.clone(),
                guard: e.guard.clone(),
                is_default: e.is_default,
            });
        }
    }
    Ok(Sequence {
        id,
        entry_edge,
        entry: target_vertex(first),
        children,
        junctions,
        transitions,
    })
}

fn join_of(ctx: &LaneCtx, split: usize) -> Result<usize, CompileError> {
    let lane = ctx.lane;
    let split_id = &lane.nodes[split].id;
    let (_, into) = lane
        .incoming(split_id)
        .next()
        .ok_or_else(|| CompileError::Internal(format!("split {split_id} has no incoming flow")))?;
    let region = ctx
        .regions
        .by_entry(&into.id)
        .ok_or_else(|| CompileError::Internal(format!("split {split_id} bounds no region")))?;
    let exit = region
        .exit_edge
        .as_deref()
        .and_then(|e| lane.edge_index(e))
        .expect("region exit");
    Ok(lane.node_index(&lane.edges[exit].source).expect("validated edge"))
}

fn build_concurrent(ctx: &LaneCtx, split: usize, join: usize) -> Result<Concurrent, CompileError> {
    let lane = ctx.lane;
    let split_id = lane.nodes[split].id.clone();
    let join_id = lane.nodes[join].id.clone();
    let entry_edge = lane
        .incoming(&split_id)
        .next()
        .map(|(_, e)| e.id.clone())
        .expect("split input");
    let exit_edge = lane
        .outgoing(&join_id)
        .next()
        .map(|(_, e)| e.id.clone())
        .expect("join output");
    let region = ctx.regions.by_entry(&entry_edge).expect("split region").id.clone();
    let mut branches = Vec::new();
    for (i, (_, e)) in lane.outgoing(&split_id).enumerate() {
        let first = lane.node_index(&e.target).expect("validated edge");
        branches.push(build_sequence(
            ctx,
            format!("{region}#{i}"),
            Some(e.id.clone()),
            first,
            Some(join),
        )?);
    }
    Ok(Concurrent {
        region,
        split: split_id,
        join: join_id,
        entry_edge,
        exit_edge,
        branches,
    })
}
