//! Random valid models.
//!
//! `structured` builds block-structured lanes (sequences, parallel blocks,
//! exclusive choices). Every exclusive choice is preceded by a task that
//! writes a dedicated decision object, and its guards read that object, so
//! each branch can be selected by the metadata given to that task.
//! `xor_dag` builds arbitrary acyclic graphs of tasks and exclusive gateways,
//! which need not be block-structured.

use std::collections::BTreeMap;

use bpmnchain::bpmn::{parse_guard, BpmnModel, DataObject, FlowNode, Lane, NodeKind, Pool, SequenceFlow};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Map, Value};

/// Metadata options per data object name. Objects not listed get `{}`.
pub type Choices = BTreeMap<String, Vec<Map<String, Value>>>;

#[derive(Debug, Clone)]
pub struct Generated {
    pub model: BpmnModel,
    pub choices: Choices,
}

#[derive(Debug, Clone)]
enum Block {
    Task,
    Par(Vec<Block>),
    Xor(Vec<Block>),
    Seq(Vec<Block>),
}

impl Block {
    fn cost(&self) -> usize {
        match self {
            Block::Task => 1,
            Block::Par(bs) => 2 + bs.iter().map(Block::cost).sum::<usize>(),
            Block::Xor(bs) => 3 + bs.iter().map(Block::cost).sum::<usize>(),
            Block::Seq(bs) => bs.iter().map(Block::cost).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    /// Flow nodes, start and end events included.
    pub max_nodes: usize,
    pub max_parallel: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_nodes: 10,
            max_parallel: 2,
        }
    }
}

struct Shape<'r> {
    rng: &'r mut StdRng,
    budget: usize,
    par_left: usize,
}

impl Shape<'_> {
    /// A block of at most `self.budget` nodes, fewer when the budget runs out.
    fn block(&mut self, depth: usize) -> Block {
        let mut items = Vec::new();
        let len = self.rng.gen_range(1..=3);
        for _ in 0..len {
            if self.budget == 0 {
                break;
            }
            let pick = self.rng.gen_range(0..10);
            let item = if pick < 3 && depth < 3 && self.par_left > 0 && self.budget >= 4 {
                self.par_left -= 1;
                self.budget -= 2;
                Block::Par(self.branches(depth))
            } else if (3..5).contains(&pick) && depth < 3 && self.budget >= 5 {
                self.budget -= 3;
                Block::Xor(self.branches(depth))
            } else {
                self.budget -= 1;
                Block::Task
            };
            items.push(item);
        }
        if items.len() == 1 {
            items.pop().expect("one")
        } else {
            Block::Seq(items)
        }
    }

    fn branches(&mut self, depth: usize) -> Vec<Block> {
        let n = if self.budget >= 3 && self.rng.gen_bool(0.3) {
            3
        } else {
            2
        };
        let mut out = Vec::new();
        let mut empty_used = false;
        for _ in 0..n {
            if self.budget == 0 || (!empty_used && self.rng.gen_bool(0.15)) {
                if empty_used {
                    break;
                }
                empty_used = true;
                out.push(Block::Seq(Vec::new()));
            } else {
                out.push(self.block(depth + 1));
            }
        }
        if out.len() < 2 {
            out.push(Block::Seq(Vec::new()));
        }
        if out.iter().filter(|b| b.cost() == 0).count() > 1 {
            // Two empty branches would be parallel flows between the same pair.
            let keep = out.iter().position(|b| b.cost() == 0).expect("one empty");
            let mut i = 0;
            out.retain(|b| {
                i += 1;
                b.cost() > 0 || i - 1 == keep
            });
        }
        if out.len() < 2 {
            out.push(Block::Task);
        }
        out
    }
}

struct Emit {
    lane: Lane,
    objects: Vec<DataObject>,
    choices: Choices,
    produced: Vec<String>,
    next: usize,
    flows: usize,
}

impl Emit {
    fn id(&mut self, prefix: &str) -> String {
        self.next += 1;
        format!("{prefix}{}", self.next)
    }

    fn node(&mut self, kind: NodeKind, id: String) -> String {
        self.lane.nodes.push(FlowNode {
            id: id.clone(),
            kind,
            name: id.clone(),
            documentation: format!("Generated {id}."),
            data_inputs: Vec::new(),
            data_outputs: Vec::new(),
        });
        id
    }

    fn flow(&mut self, from: &str, to: &str, guard: Option<&str>, is_default: bool) {
        self.flows += 1;
        self.lane.flows.push(SequenceFlow {
            id: format!("F{}", self.flows),
            source: from.to_string(),
            target: to.to_string(),
            guard: guard.map(|g| parse_guard(g).expect("generated guard parses")),
            is_default,
        });
    }

    fn object(&mut self, name: String) -> String {
        let id = format!("DO_{name}");
        self.objects.push(DataObject {
            id: id.clone(),
            name,
            schema_hint: None,
        });
        id
    }

    fn task(&mut self, rng: &mut StdRng) -> String {
        let id = self.id("T");
        let node = self.node(NodeKind::Task, id.clone());
        if !self.produced.is_empty() && rng.gen_bool(0.5) {
            let input = self.produced[rng.gen_range(0..self.produced.len())].clone();
            self.last_node().data_inputs.push(input);
        }
        if rng.gen_bool(0.6) {
            let obj = self.object(format!("D{id}"));
            self.last_node().data_outputs.push(obj.clone());
            self.produced.push(obj);
        }
        node
    }

    fn last_node(&mut self) -> &mut FlowNode {
        self.lane.nodes.last_mut().expect("node just pushed")
    }

    /// Emit `b` after `from`; returns the last node of the block.
    fn block(&mut self, b: &Block, from: String, rng: &mut StdRng) -> String {
        match b {
            Block::Task => {
                let t = self.task(rng);
                self.flow(&from, &t, None, false);
                t
            }
            Block::Seq(items) => items.iter().fold(from, |prev, item| self.block(item, prev, rng)),
            Block::Par(branches) => {
                let split = self.id("Par");
                let split = self.node(NodeKind::ParallelGateway, split);
                self.flow(&from, &split, None, false);
                let join = format!("{split}_join");
                let ends: Vec<String> = branches.iter().map(|br| self.block(br, split.clone(), rng)).collect();
                self.node(NodeKind::ParallelGateway, join.clone());
                for e in ends {
                    self.flow(&e, &join, None, false);
                }
                join
            }
            Block::Xor(branches) => {
                let decide = self.id("Decide");
                let decide = self.node(NodeKind::Task, decide);
                let obj_name = format!("Route{}", self.next);
                let obj = self.object(obj_name.clone());
                self.last_node().data_outputs.push(obj.clone());
                self.produced.push(obj);
                self.flow(&from, &decide, None, false);
                let split = self.id("Xor");
                let split = self.node(NodeKind::ExclusiveGateway, split);
                self.flow(&decide, &split, None, false);
                let join = format!("{split}_join");
                let mut ends = Vec::new();
                let n = branches.len();
                for (i, br) in branches.iter().enumerate() {
                    let start_flow = self.lane.flows.len();
                    let end = self.block(br, split.clone(), rng);
                    // The first flow emitted for the branch leaves the split,
                    // or, for an empty branch, is added below.
                    ends.push((end, start_flow, i));
                }
                self.node(NodeKind::ExclusiveGateway, join.clone());
                for (end, start_flow, i) in ends {
                    let (guard, is_default) = if i + 1 == n {
                        (None, true)
                    } else {
                        (Some(format!("{obj_name}.route == {i}")), false)
                    };
                    if end == split {
                        self.flow(&split, &join, guard.as_deref(), is_default);
                    } else {
                        let f = &mut self.lane.flows[start_flow];
                        debug_assert_eq!(f.source, split);
                        f.guard = guard.map(|g| parse_guard(&g).expect("generated guard parses"));
                        f.is_default = is_default;
                        self.flow(&end, &join, None, false);
                    }
                }
                self.choices.insert(
                    obj_name,
                    (0..n)
                        .map(|i| json!({ "route": i }).as_object().cloned().expect("object"))
                        .collect(),
                );
                join
            }
        }
    }
}

fn model_of(lane: Lane, objects: Vec<DataObject>) -> BpmnModel {
    BpmnModel {
        pools: vec![Pool {
            id: "P_Gen".into(),
            name: "Gen".into(),
            process_id: "Gen".into(),
            lanes: vec![lane],
        }],
        message_flows: Vec::new(),
        data_objects: objects,
    }
}

fn empty_lane() -> Lane {
    Lane {
        id: "Gen".into(),
        name: "Gen".into(),
        nodes: Vec::new(),
        flows: Vec::new(),
    }
}

/// A block-structured single-lane model within `limits`.
pub fn structured(seed: u64, limits: Limits) -> Generated {
    let mut rng = StdRng::seed_from_u64(seed);
    loop {
        let g = structured_once(&mut rng, limits);
        if g.model.nodes().count() <= limits.max_nodes.max(3) {
            return g;
        }
    }
}

fn structured_once(rng: &mut StdRng, limits: Limits) -> Generated {
    let budget = limits.max_nodes.saturating_sub(2).max(1);
    let body = {
        let mut s = Shape {
            rng: &mut *rng,
            budget,
            par_left: limits.max_parallel,
        };
        let b = s.block(0);
        if b.cost() == 0 {
            Block::Task
        } else {
            b
        }
    };
    let mut e = Emit {
        lane: empty_lane(),
        objects: Vec::new(),
        choices: Choices::new(),
        produced: Vec::new(),
        next: 0,
        flows: 0,
    };
    let start = e.node(NodeKind::StartEvent, "Start".into());
    let last = e.block(&body, start, rng);
    let end = e.node(NodeKind::EndEvent, "End".into());
    e.flow(&last, &end, None, false);
    Generated {
        model: model_of(e.lane, e.objects),
        choices: e.choices,
    }
}

/// An acyclic lane of tasks and exclusive gateways with at most `max_edges`
/// flows; joins may merge any two open paths, so regions need not nest as
/// blocks. Returns `None` when the draw overshoots the edge budget.
pub fn xor_dag(seed: u64, max_edges: usize) -> Option<BpmnModel> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut e = Emit {
        lane: empty_lane(),
        objects: Vec::new(),
        choices: Choices::new(),
        produced: Vec::new(),
        next: 0,
        flows: 0,
    };
    e.object("Route".into());
    let start = e.node(NodeKind::StartEvent, "Start".into());
    // Open ports: nodes with one pending outgoing flow each.
    let mut open = vec![start];
    let mut ends = 0;
    while e.flows + open.len() < max_edges && !open.is_empty() {
        let i = rng.gen_range(0..open.len());
        match rng.gen_range(0..10) {
            0..=3 => {
                let from = open.remove(i);
                let t = e.id("T");
                let t = e.node(NodeKind::Task, t);
                e.flow(&from, &t, None, false);
                open.push(t);
            }
            4..=5 => {
                let from = open.remove(i);
                let x = e.id("X");
                let x = e.node(NodeKind::ExclusiveGateway, x);
                e.flow(&from, &x, None, false);
                // Two outgoing ports; guards are attached when the flows are drawn.
                open.push(x.clone());
                open.push(x);
            }
            6..=7 if open.len() >= 2 => {
                let a = open.remove(i);
                let j = rng.gen_range(0..open.len());
                if open[j] == a {
                    open.push(a);
                    continue;
                }
                let b = open.remove(j);
                let m = e.id("J");
                let m = e.node(NodeKind::ExclusiveGateway, m);
                e.flow(&a, &m, None, false);
                e.flow(&b, &m, None, false);
                open.push(m);
            }
            8 if open.len() >= 2 => {
                let from = open.remove(i);
                ends += 1;
                let end = e.node(NodeKind::EndEvent, format!("End{ends}"));
                e.flow(&from, &end, None, false);
            }
            _ => {}
        }
    }
    ends += 1;
    let end = e.node(NodeKind::EndEvent, format!("End{ends}"));
    for from in std::mem::take(&mut open) {
        e.flow(&from, &end, None, false);
    }
    if e.flows > max_edges {
        return None;
    }
    // Guards on exclusive splits: the first outgoing flow is the default.
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let splits: Vec<String> = e
        .lane
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::ExclusiveGateway)
        .filter(|n| e.lane.flows.iter().filter(|f| f.source == n.id).count() >= 2)
        .map(|n| n.id.clone())
        .collect();
    for f in &mut e.lane.flows {
        if splits.contains(&f.source) {
            let k = seen.entry(f.source.clone()).or_insert(0);
            if *k == 0 {
                f.is_default = true;
            } else {
                f.guard = Some(parse_guard(&format!("Route.route == {k}")).expect("guard"));
            }
            *k += 1;
        }
    }
    // An exclusive gateway that ended with one in and one out is a plain
    // pass-through; such shapes are invalid, so reject the draw.
    let model = model_of(e.lane, e.objects);
    bpmnchain::bpmn::validate_model(&model).is_empty().then_some(model)
}
