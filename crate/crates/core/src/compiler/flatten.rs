//! Flattening of the hierarchical machine into a network of communicating
//! finite state machines.
//!
//! State names:
//!
//! * `init` / `idle` - initial state of a lane root / branch machine
//! * `n:<nodeId>` - control is at a flow node (for a task: requested,
//!   waiting for its completion)
//! * `recv:<taskId>` - a task waiting for its incoming messages
//! * `wait:<regionId>` - a parallel block is running in branch machines
//! * `done` - finished
//!
//! Event names: `start:<laneId>`, `complete:<taskId>`, `msg:<messageFlowId>`,
//! `fork:<regionId>:<i>`, `done:<regionId>:<i>`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::hsm::{Atomic, DeHsm, HsmState, Sequence, Vertex};
use super::scopes::TransactionScope;
use crate::bpmn::{GuardExpr, NodeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FsmNetwork {
    pub machines: Vec<DeFsm>,
    pub channels: Vec<Channel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeFsm {
    pub id: String,
    pub lane: String,
    /// Machine whose `wait:` state runs this branch; `None` for lane roots.
    pub parent: Option<String>,
    pub region: Option<String>,
    pub states: Vec<String>,
    pub initial: String,
    pub accepting: Vec<String>,
    pub transitions: Vec<FsmTransition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FsmTransition {
    pub from: String,
    pub to: String,
    pub trigger: Trigger,
    #[serde(with = "guard_text")]
    pub guard: Option<GuardExpr>,
    pub is_default: bool,
    /// Sequence flow taken, when the transition follows one.
    pub edge: Option<String>,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Trigger {
    Auto,
    Event(String),
    AllOf(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Action {
    RequestTask { task: String },
    Emit { event: String, carries: Option<String> },
    OpenScope { scope: String },
    CommitScope { scope: String },
    Finish,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Channel {
    pub emitter: String,
    pub event: String,
    pub receiver: String,
}

impl Trigger {
    pub fn events(&self) -> Vec<&str> {
        match self {
            Trigger::Auto => Vec::new(),
            Trigger::Event(e) => vec![e.as_str()],
            Trigger::AllOf(es) => es.iter().map(String::as_str).collect(),
        }
    }

    fn of(mut events: Vec<String>) -> Trigger {
        match events.len() {
            0 => Trigger::Auto,
            1 => Trigger::Event(events.remove(0)),
            _ => Trigger::AllOf(events),
        }
    }
}

impl FsmNetwork {
    pub fn machine(&self, id: &str) -> Option<&DeFsm> {
        self.machines.iter().find(|m| m.id == id)
    }
}

pub fn start_event(lane: &str) -> String {
    format!("start:{lane}")
}

pub fn complete_event(task: &str) -> String {
    format!("complete:{task}")
}

pub fn msg_event(flow: &str) -> String {
    format!("msg:{flow}")
}

pub fn fork_event(region: &str, branch: usize) -> String {
    format!("fork:{region}:{branch}")
}

pub fn done_event(region: &str, branch: usize) -> String {
    format!("done:{region}:{branch}")
}

mod guard_text {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::bpmn::{parse_guard, GuardExpr};

    pub fn serialize<S: Serializer>(g: &Option<GuardExpr>, s: S) -> Result<S::Ok, S::Error> {
        g.as_ref().map(|g| g.to_string()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<GuardExpr>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|t| parse_guard(&t).map_err(serde::de::Error::custom))
            .transpose()
    }
}

struct Builder {
    id: String,
    lane: String,
    parent: Option<String>,
    region: Option<String>,
    states: Vec<String>,
    transitions: Vec<FsmTransition>,
}

impl Builder {
    fn state(&mut self, s: &str) {
        if !self.states.iter().any(|x| x == s) {
            self.states.push(s.to_string());
        }
    }

    fn add(&mut self, t: FsmTransition) {
        self.state(&t.from);
        self.state(&t.to);
        self.transitions.push(t);
    }
}

struct Flattener<'a> {
    scopes: &'a [TransactionScope],
    depth: BTreeMap<&'a str, usize>,
    machines: Vec<DeFsm>,
}

/// Flatten every lane of the hierarchical machine. Scope begin/commit markers
/// are attached to the transitions that traverse the scope's boundary flows.
pub fn flatten_hsm(h: &DeHsm, scopes: &[TransactionScope]) -> FsmNetwork {
    let mut depth = BTreeMap::new();
    for s in scopes {
        let mut d = 0;
        let mut p = s.parent.as_deref();
        while let Some(id) = p {
            d += 1;
            p = scopes.iter().find(|x| x.id == id).and_then(|x| x.parent.as_deref());
        }
        depth.insert(s.id.as_str(), d);
    }
    let mut f = Flattener {
        scopes,
        depth,
        machines: Vec::new(),
    };
    let mut branches = Vec::new();
    for (lane, seq) in &h.lanes {
        let mut b = Builder {
            id: lane.clone(),
            lane: lane.clone(),
            parent: None,
            region: None,
            states: vec!["init".into()],
            transitions: Vec::new(),
        };
        let (to, mut actions) = f.enter(seq, seq.entry, &[]);
        actions.insert(0, Action::OpenScope { scope: lane.clone() });
        b.add(FsmTransition {
            from: "init".into(),
            to,
            trigger: Trigger::Event(start_event(lane)),
            guard: None,
            is_default: false,
            edge: None,
            actions,
        });
        f.lower(seq, &mut b, &[], &mut branches);
        f.machines.push(DeFsm {
            id: b.id,
            lane: b.lane,
            parent: b.parent,
            region: b.region,
            states: b.states,
            initial: "init".into(),
            accepting: vec!["done".into()],
            transitions: b.transitions,
        });
    }
    f.machines.extend(branches);
    let channels = channels_of(&f.machines);
    FsmNetwork {
        machines: f.machines,
        channels,
    }
}

impl<'a> Flattener<'a> {
    fn edge_actions(&self, edge: Option<&str>) -> Vec<Action> {
        let Some(edge) = edge else {
            return Vec::new();
        };
        let mut commits: Vec<&TransactionScope> = self
            .scopes
            .iter()
            .filter(|s| s.exit_edge.as_deref() == Some(edge))
            .collect();
        commits.sort_by_key(|s| std::cmp::Reverse(self.depth[s.id.as_str()]));
        let mut opens: Vec<&TransactionScope> = self
            .scopes
            .iter()
            .filter(|s| s.entry_edge.as_deref() == Some(edge))
            .collect();
        opens.sort_by_key(|s| self.depth[s.id.as_str()]);
        commits
            .into_iter()
            .map(|s| Action::CommitScope { scope: s.id.clone() })
            .chain(opens.into_iter().map(|s| Action::OpenScope { scope: s.id.clone() }))
            .collect()
    }

    /// State reached by entering `v`, and the actions performed on entry.
    fn enter(&self, seq: &Sequence, v: Vertex, exit_actions: &[Action]) -> (String, Vec<Action>) {
        match v {
            Vertex::Exit => ("done".into(), exit_actions.to_vec()),
            Vertex::Junction(j) => (format!("n:{}", seq.junctions[j].node), Vec::new()),
            Vertex::Child(c) => match &seq.children[c] {
                HsmState::Atomic(a) if a.kind == NodeKind::Task => {
                    if a.incoming_messages.is_empty() {
                        (
                            format!("n:{}", a.node),
                            vec![Action::RequestTask { task: a.node.clone() }],
                        )
                    } else {
                        (format!("recv:{}", a.node), Vec::new())
                    }
                }
                HsmState::Atomic(a) => (format!("n:{}", a.node), Vec::new()),
                HsmState::Concurrent(k) => (
                    format!("wait:{}", k.region),
                    (0..k.branches.len())
                        .map(|i| Action::Emit {
                            event: fork_event(&k.region, i),
                            carries: None,
                        })
                        .collect(),
                ),
                HsmState::Sequence(inner) => self.enter(inner, inner.entry, exit_actions),
            },
        }
    }

    /// Transitions leaving `from` along the sequence's flows out of `v`.
    fn follow(
        &self,
        seq: &Sequence,
        v: Vertex,
        from: &str,
        trigger: Trigger,
        pre: Vec<Action>,
        exit_actions: &[Action],
        b: &mut Builder,
    ) {
        for t in seq.outgoing(v) {
            let (to, entry) = self.enter(seq, t.to, exit_actions);
            let mut actions = pre.clone();
            actions.extend(self.edge_actions(Some(&t.edge)));
            actions.extend(entry);
            b.add(FsmTransition {
                from: from.to_string(),
                to,
                trigger: trigger.clone(),
                guard: t.guard.clone(),
                is_default: t.is_default,
                edge: Some(t.edge.clone()),
                actions,
            });
        }
    }

    fn lower(&mut self, seq: &Sequence, b: &mut Builder, exit_actions: &[Action], branches: &mut Vec<DeFsm>) {
        for (j, junction) in seq.junctions.iter().enumerate() {
            let state = format!("n:{}", junction.node);
            self.follow(
                seq,
                Vertex::Junction(j),
                &state,
                Trigger::Auto,
                Vec::new(),
                exit_actions,
                b,
            );
        }
        for (c, child) in seq.children.iter().enumerate() {
            let v = Vertex::Child(c);
            match child {
                HsmState::Atomic(a) => self.lower_atomic(seq, v, a, b, exit_actions),
                HsmState::Concurrent(k) => {
                    let wait = format!("wait:{}", k.region);
                    let done: Vec<String> = (0..k.branches.len()).map(|i| done_event(&k.region, i)).collect();
                    self.follow(seq, v, &wait, Trigger::of(done), Vec::new(), exit_actions, b);
                    for (i, branch) in k.branches.iter().enumerate() {
                        self.branch_machine(&b.id, &b.lane, &k.region, i, branch, branches);
                    }
                }
                HsmState::Sequence(inner) => self.lower(inner, b, exit_actions, branches),
            }
        }
    }

    fn lower_atomic(&self, seq: &Sequence, v: Vertex, a: &Atomic, b: &mut Builder, exit_actions: &[Action]) {
        let here = format!("n:{}", a.node);
        let messages: Vec<String> = a.incoming_messages.iter().map(|f| msg_event(f)).collect();
        let emits: Vec<Action> = a
            .outgoing_messages
            .iter()
            .map(|m| Action::Emit {
                event: msg_event(&m.flow),
                carries: m.carries.clone(),
            })
            .collect();
        match a.kind {
            NodeKind::Task => {
                if !messages.is_empty() {
                    b.add(FsmTransition {
                        from: format!("recv:{}", a.node),
                        to: here.clone(),
                        trigger: Trigger::of(messages),
                        guard: None,
                        is_default: false,
                        edge: None,
                        actions: vec![Action::RequestTask { task: a.node.clone() }],
                    });
                }
                self.follow(
                    seq,
                    v,
                    &here,
                    Trigger::Event(complete_event(&a.node)),
                    emits,
                    exit_actions,
                    b,
                );
            }
            NodeKind::EndEvent => {
                b.add(FsmTransition {
                    from: here,
                    to: "done".into(),
                    trigger: Trigger::Auto,
                    guard: None,
                    is_default: false,
                    edge: None,
                    actions: vec![Action::CommitScope { scope: b.lane.clone() }, Action::Finish],
                });
            }
            _ => self.follow(seq, v, &here, Trigger::of(messages), emits, exit_actions, b),
        }
    }

    fn branch_machine(
        &mut self,
        parent: &str,
        lane: &str,
        region: &str,
        i: usize,
        seq: &Sequence,
        branches: &mut Vec<DeFsm>,
    ) {
        let exit_actions = vec![Action::Emit {
            event: done_event(region, i),
            carries: None,
        }];
        let mut b = Builder {
            id: seq.id.clone(),
            lane: lane.to_string(),
            parent: Some(parent.to_string()),
            region: Some(region.to_string()),
            states: vec!["idle".into()],
            transitions: Vec::new(),
        };
        let (to, entry) = self.enter(seq, seq.entry, &exit_actions);
        let mut actions = self.edge_actions(seq.entry_edge.as_deref());
        actions.extend(entry);
        b.add(FsmTransition {
            from: "idle".into(),
            to,
            trigger: Trigger::Event(fork_event(region, i)),
            guard: None,
            is_default: false,
            edge: seq.entry_edge.clone(),
            actions,
        });
        let mut nested = Vec::new();
        self.lower(seq, &mut b, &exit_actions, &mut nested);
        branches.push(DeFsm {
            id: b.id,
            lane: b.lane,
            parent: b.parent,
            region: b.region,
            states: b.states,
            initial: "idle".into(),
            accepting: vec!["idle".into(), "done".into()],
            transitions: b.transitions,
        });
        branches.extend(nested);
    }
}

fn channels_of(machines: &[DeFsm]) -> Vec<Channel> {
    let mut consumers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for m in machines {
        for t in &m.transitions {
            for e in t.trigger.events() {
                let list = consumers.entry(e).or_default();
                if !list.contains(&m.id.as_str()) {
                    list.push(&m.id);
                }
            }
        }
    }
    let mut out = Vec::new();
    for m in machines {
        for t in &m.transitions {
            for a in &t.actions {
                if let Action::Emit { event, .. } = a {
                    for r in consumers.get(event.as_str()).into_iter().flatten() {
                        out.push(Channel {
                            emitter: m.id.clone(),
                            event: event.clone(),
                            receiver: r.to_string(),
                        });
                    }
                }
            }
        }
    }
    out
}
