//! Exhaustive task-completion traces of a compiled model, computed two ways:
//! by interpreting the hierarchical machine directly, and by running the
//! flattened network through the engine's runtime.
//!
//! A trace is the order in which tasks were completed, plus how the run
//! ended. Every pending task may be completed next, with every metadata
//! option listed for its outputs, so the set of traces covers all
//! interleavings and all exclusive choices the options can reach.

use std::collections::{BTreeMap, BTreeSet};

use bpmnchain::bpmn::{eval_guard, GuardExpr, NodeKind};
use bpmnchain::compiler::{Action, DeHsm, FsmNetwork, HsmState, MonitorProgram, Sequence, Vertex};
use bpmnchain::engine::{NetworkState, Runtime};
use serde_json::{Map, Value};

use crate::gen::Choices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Outcome {
    Completed,
    Faulted,
    /// Nothing pending, yet not every lane finished.
    Stuck,
}

pub type Trace = (Vec<String>, Outcome);

type Data = BTreeMap<String, Map<String, Value>>;

/// Stop exploring beyond this many traces; both sides use the same cap.
pub const TRACE_CAP: usize = 20_000;

fn output_options(outputs: &[String], choices: &Choices) -> Vec<Vec<(String, Map<String, Value>)>> {
    let mut combos: Vec<Vec<(String, Map<String, Value>)>> = vec![Vec::new()];
    for o in outputs {
        let opts = choices.get(o).cloned().unwrap_or_else(|| vec![Map::new()]);
        combos = combos
            .into_iter()
            .flat_map(|c| {
                opts.iter().map(move |m| {
                    let mut c = c.clone();
                    c.push((o.clone(), m.clone()));
                    c
                })
            })
            .collect();
    }
    combos
}

/// Exclusive choice among flows: a single unguarded flow is taken; else the
/// one flow whose guard holds; else the default. Anything else faults.
fn pick(options: &[(&Option<GuardExpr>, bool, usize)], data: &Data) -> Option<usize> {
    if let [(None, false, i)] = options {
        return Some(*i);
    }
    let mut hold = Vec::new();
    for (g, is_default, i) in options {
        if *is_default {
            continue;
        }
        match g {
            None => hold.push(*i),
            Some(g) => match eval_guard(g, data) {
                Ok(true) => hold.push(*i),
                Ok(false) => {}
                Err(_) => return None,
            },
        }
    }
    match hold.len() {
        1 => Some(hold[0]),
        0 => options.iter().find(|o| o.1).map(|o| o.2),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Direct interpretation of the hierarchical machine.

#[derive(Debug, Clone)]
enum Pos<'h> {
    Enter(Vertex),
    WaitMessages(usize),
    WaitTask(usize),
    Concurrent(usize, Vec<Run<'h>>),
    Done,
}

#[derive(Debug, Clone)]
struct Run<'h> {
    seq: &'h Sequence,
    pos: Pos<'h>,
}

#[derive(Debug, Clone, Default)]
struct World {
    data: Data,
    messages: BTreeMap<String, usize>,
    pending: BTreeSet<String>,
    completed: BTreeSet<String>,
}

struct Fault;

fn leave(run: &mut Run<'_>, c: usize, world: &World) -> Result<(), Fault> {
    let seq = run.seq;
    let outs: Vec<(&Option<GuardExpr>, bool, usize)> = seq
        .transitions
        .iter()
        .enumerate()
        .filter(|(_, t)| t.from == Vertex::Child(c))
        .map(|(i, t)| (&t.guard, t.is_default, i))
        .collect();
    let t = pick(&outs, &world.data).ok_or(Fault)?;
    run.pos = Pos::Enter(seq.transitions[t].to);
    Ok(())
}

fn emit(world: &mut World, flows: impl IntoIterator<Item = String>) {
    for f in flows {
        *world.messages.entry(f).or_insert(0) += 1;
    }
}

/// Advance a run as far as it can go; reports whether anything moved.
fn settle(run: &mut Run<'_>, world: &mut World) -> Result<bool, Fault> {
    let mut moved = false;
    loop {
        let seq = run.seq;
        match run.pos.clone() {
            Pos::Done => return Ok(moved),
            Pos::Enter(Vertex::Exit) => run.pos = Pos::Done,
            Pos::Enter(Vertex::Junction(j)) => {
                let outs: Vec<(&Option<GuardExpr>, bool, usize)> = seq
                    .transitions
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.from == Vertex::Junction(j))
                    .map(|(i, t)| (&t.guard, t.is_default, i))
                    .collect();
                let t = pick(&outs, &world.data).ok_or(Fault)?;
                run.pos = Pos::Enter(seq.transitions[t].to);
            }
            Pos::Enter(Vertex::Child(c)) => match &seq.children[c] {
                HsmState::Atomic(a) if a.kind == NodeKind::EndEvent => run.pos = Pos::Done,
                HsmState::Atomic(a) if !a.incoming_messages.is_empty() => run.pos = Pos::WaitMessages(c),
                HsmState::Atomic(a) if a.kind == NodeKind::Task => {
                    world.pending.insert(a.node.clone());
                    run.pos = Pos::WaitTask(c);
                }
                HsmState::Atomic(a) => {
                    emit(world, a.outgoing_messages.iter().map(|m| m.flow.clone()));
                    leave(run, c, world)?;
                }
                HsmState::Concurrent(k) => {
                    let runs = k
                        .branches
                        .iter()
                        .map(|b| Run {
                            seq: b,
                            pos: Pos::Enter(b.entry),
                        })
                        .collect();
                    run.pos = Pos::Concurrent(c, runs);
                }
                HsmState::Sequence(_) => unreachable!("sequences are not nested as children"),
            },
            Pos::WaitMessages(c) => {
                let HsmState::Atomic(a) = &seq.children[c] else {
                    unreachable!()
                };
                if !a
                    .incoming_messages
                    .iter()
                    .all(|f| world.messages.get(f).copied().unwrap_or(0) > 0)
                {
                    return Ok(moved);
                }
                for f in &a.incoming_messages {
                    *world.messages.get_mut(f).expect("present") -= 1;
                }
                if a.kind == NodeKind::Task {
                    world.pending.insert(a.node.clone());
                    run.pos = Pos::WaitTask(c);
                } else {
                    emit(world, a.outgoing_messages.iter().map(|m| m.flow.clone()));
                    leave(run, c, world)?;
                }
            }
            Pos::WaitTask(c) => {
                let HsmState::Atomic(a) = &seq.children[c] else {
                    unreachable!()
                };
                if !world.completed.remove(&a.node) {
                    return Ok(moved);
                }
                emit(world, a.outgoing_messages.iter().map(|m| m.flow.clone()));
                leave(run, c, world)?;
            }
            Pos::Concurrent(c, mut runs) => {
                let mut inner = false;
                for r in &mut runs {
                    inner |= settle(r, world)?;
                }
                let all_done = runs.iter().all(|r| matches!(r.pos, Pos::Done));
                run.pos = Pos::Concurrent(c, runs);
                if !all_done {
                    return Ok(moved || inner);
                }
                leave(run, c, world)?;
            }
        }
        moved = true;
    }
}

#[derive(Clone)]
struct Config<'h> {
    lanes: Vec<Run<'h>>,
    world: World,
}

fn settle_all(s: &mut Config<'_>) -> Result<(), Fault> {
    loop {
        let mut moved = false;
        for r in &mut s.lanes {
            moved |= settle(r, &mut s.world)?;
        }
        if !moved {
            return Ok(());
        }
    }
}

/// Traces of the hierarchical machine.
pub fn hsm_traces(hsm: &DeHsm, program: &MonitorProgram, choices: &Choices) -> BTreeSet<Trace> {
    let mut s = Config {
        lanes: hsm
            .lanes
            .values()
            .map(|seq| Run {
                seq,
                pos: Pos::Enter(seq.entry),
            })
            .collect(),
        world: World::default(),
    };
    let mut out = BTreeSet::new();
    match settle_all(&mut s) {
        Ok(()) => hsm_explore(s, program, choices, &mut Vec::new(), &mut out),
        Err(Fault) => {
            out.insert((Vec::new(), Outcome::Faulted));
        }
    }
    out
}

fn hsm_explore(
    s: Config<'_>,
    program: &MonitorProgram,
    choices: &Choices,
    trace: &mut Vec<String>,
    out: &mut BTreeSet<Trace>,
) {
    if out.len() >= TRACE_CAP {
        return;
    }
    if s.world.pending.is_empty() {
        let done = s.lanes.iter().all(|r| matches!(r.pos, Pos::Done));
        out.insert((trace.clone(), if done { Outcome::Completed } else { Outcome::Stuck }));
        return;
    }
    for task in s.world.pending.clone() {
        let outputs = program.task_flow(&task).map(|f| f.outputs.clone()).unwrap_or_default();
        for combo in output_options(&outputs, choices) {
            let mut next = s.clone();
            next.world.pending.remove(&task);
            next.world.completed.insert(task.clone());
            for (name, meta) in combo {
                next.world.data.insert(name, meta);
            }
            trace.push(task.clone());
            match settle_all(&mut next) {
                Ok(()) => hsm_explore(next, program, choices, trace, out),
                Err(Fault) => {
                    out.insert((trace.clone(), Outcome::Faulted));
                }
            }
            trace.pop();
        }
    }
}

// ---------------------------------------------------------------------------
// The flattened network, run by the engine's runtime.

#[derive(Clone)]
struct NetState {
    net: NetworkState,
    data: Data,
    pending: BTreeSet<String>,
}

/// Run queued events to exhaustion; `false` on a guard fault.
fn net_drain(rt: &Runtime, network: &FsmNetwork, s: &mut NetState) -> bool {
    while !s.net.queue.is_empty() {
        let out = rt.step(network, &mut s.net, &s.data).expect("queue nonempty");
        for f in &out.firings {
            for a in &f.actions {
                if let Action::RequestTask { task } = a {
                    s.pending.insert(task.clone());
                }
            }
        }
        if out.fault.is_some() {
            return false;
        }
    }
    true
}

/// Traces of the flattened network.
pub fn fsm_traces(program: &MonitorProgram, choices: &Choices) -> BTreeSet<Trace> {
    let network = &program.network;
    let rt = Runtime::new(network);
    let mut s = NetState {
        net: rt.initial_state(network),
        data: Data::new(),
        pending: BTreeSet::new(),
    };
    let mut lanes = program.actors.clone();
    lanes.sort();
    for l in &lanes {
        rt.enqueue(&mut s.net, &format!("start:{l}"), Value::Null, None);
    }
    let mut out = BTreeSet::new();
    if net_drain(&rt, network, &mut s) {
        fsm_explore(&rt, program, s, choices, &mut Vec::new(), &mut out);
    } else {
        out.insert((Vec::new(), Outcome::Faulted));
    }
    out
}

fn fsm_explore(
    rt: &Runtime,
    program: &MonitorProgram,
    s: NetState,
    choices: &Choices,
    trace: &mut Vec<String>,
    out: &mut BTreeSet<Trace>,
) {
    if out.len() >= TRACE_CAP {
        return;
    }
    if s.pending.is_empty() {
        let done = rt.all_accepting(&program.network, &s.net);
        out.insert((trace.clone(), if done { Outcome::Completed } else { Outcome::Stuck }));
        return;
    }
    for task in s.pending.clone() {
        let outputs = program.task_flow(&task).map(|f| f.outputs.clone()).unwrap_or_default();
        for combo in output_options(&outputs, choices) {
            let mut next = s.clone();
            next.pending.remove(&task);
            for (name, meta) in combo {
                next.data.insert(name, meta);
            }
            rt.enqueue(&mut next.net, &format!("complete:{task}"), Value::Null, None);
            trace.push(task.clone());
            if net_drain(rt, &program.network, &mut next) {
                fsm_explore(rt, program, next, choices, trace, out);
            } else {
                out.insert((trace.clone(), Outcome::Faulted));
            }
            trace.pop();
        }
    }
}

/// Task sequences alone.
pub fn task_sequences(traces: &BTreeSet<Trace>) -> BTreeSet<Vec<String>> {
    traces.iter().map(|(t, _)| t.clone()).collect()
}
