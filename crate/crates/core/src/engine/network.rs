//! Pure discrete-event execution of an FSM network.
//!
//! Events are queued with a monotone sequence number and dequeued in
//! ascending `(seq, name)` order. A dequeued event is latched into the inbox
//! of every machine that has a transition mentioning it; each such machine
//! then runs to completion: `Auto` transitions fire immediately, and event
//! transitions fire once every event they need is in the inbox.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bpmn::{eval_guard, DataContext};
use crate::compiler::{Action, DeFsm, FsmNetwork, FsmTransition, Trigger};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeEvent {
    pub seq: u64,
    pub name: String,
    pub payload: Value,
    pub origin_machine: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NetworkState {
    pub states: BTreeMap<String, String>,
    /// Delivered events not yet consumed, per machine.
    pub inbox: BTreeMap<String, Vec<String>>,
    pub queue: Vec<DeEvent>,
    pub next_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Firing {
    pub machine: String,
    pub from: String,
    pub to: String,
    pub edge: Option<String>,
    pub consumed: Vec<String>,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepOutcome {
    pub event: DeEvent,
    pub consumers: Vec<String>,
    /// Firings in order, including those made before a fault.
    pub firings: Vec<Firing>,
    pub fault: Option<GuardFault>,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("guard fault in {machine} at {state}: {reason}")]
pub struct GuardFault {
    pub machine: String,
    pub state: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("event queue is empty")]
pub struct EmptyQueue;

/// Lookup tables over a network.
#[derive(Debug, Clone)]
pub struct Runtime {
    machine_index: BTreeMap<String, usize>,
    consumers: BTreeMap<String, Vec<String>>,
}

impl Runtime {
    pub fn new(net: &FsmNetwork) -> Runtime {
        let mut consumers: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for m in &net.machines {
            for t in &m.transitions {
                for e in t.trigger.events() {
                    let list = consumers.entry(e.to_string()).or_default();
                    if !list.contains(&m.id) {
                        list.push(m.id.clone());
                    }
                }
            }
        }
        for list in consumers.values_mut() {
            list.sort();
        }
        Runtime {
            machine_index: net
                .machines
                .iter()
                .enumerate()
                .map(|(i, m)| (m.id.clone(), i))
                .collect(),
            consumers,
        }
    }

    pub fn initial_state(&self, net: &FsmNetwork) -> NetworkState {
        NetworkState {
            states: net.machines.iter().map(|m| (m.id.clone(), m.initial.clone())).collect(),
            ..NetworkState::default()
        }
    }

    pub fn consumers_of(&self, event: &str) -> &[String] {
        self.consumers.get(event).map_or(&[], Vec::as_slice)
    }

    pub fn enqueue(&self, st: &mut NetworkState, name: &str, payload: Value, origin: Option<&str>) -> u64 {
        let seq = st.next_seq;
        st.next_seq += 1;
        st.queue.push(DeEvent {
            seq,
            name: name.to_string(),
            payload,
            origin_machine: origin.map(str::to_string),
        });
        st.queue.sort_by(|a, b| (a.seq, &a.name).cmp(&(b.seq, &b.name)));
        seq
    }

    /// Dequeue the least event and run every consuming machine to completion.
    /// On a guard fault the remaining consumers are not settled and the state
    /// is left as it was at the fault.
    pub fn step(
        &self,
        net: &FsmNetwork,
        st: &mut NetworkState,
        ctx: &dyn DataContext,
    ) -> Result<StepOutcome, EmptyQueue> {
        if st.queue.is_empty() {
            return Err(EmptyQueue);
        }
        let event = st.queue.remove(0);
        let consumers = self.consumers_of(&event.name).to_vec();
        let mut firings = Vec::new();
        for m in &consumers {
            st.inbox.entry(m.clone()).or_default().push(event.name.clone());
        }
        let mut fault = None;
        for m in &consumers {
            if let Err(f) = self.settle(net, st, m, ctx, &mut firings) {
                fault = Some(f);
                break;
            }
        }
        Ok(StepOutcome {
            event,
            consumers,
            firings,
            fault,
        })
    }

    fn machine<'n>(&self, net: &'n FsmNetwork, id: &str) -> &'n DeFsm {
        &net.machines[self.machine_index[id]]
    }

    fn settle(
        &self,
        net: &FsmNetwork,
        st: &mut NetworkState,
        machine: &str,
        ctx: &dyn DataContext,
        firings: &mut Vec<Firing>,
    ) -> Result<(), GuardFault> {
        let m = self.machine(net, machine);
        loop {
            let state = st.states[machine].clone();
            let outs: Vec<&FsmTransition> = m.transitions.iter().filter(|t| t.from == state).collect();
            let autos: Vec<&FsmTransition> = outs.iter().copied().filter(|t| t.trigger == Trigger::Auto).collect();
            let (t, consumed) = if !autos.is_empty() {
                (choose(machine, &state, &autos, ctx)?, Vec::new())
            } else {
                let inbox = st.inbox.entry(machine.to_string()).or_default();
                let Some(t) = outs.iter().copied().find(|t| {
                    let need = t.trigger.events();
                    !need.is_empty() && need.iter().all(|e| inbox.iter().any(|x| x == e))
                }) else {
                    return Ok(());
                };
                let need: Vec<String> = t.trigger.events().iter().map(|e| e.to_string()).collect();
                for e in &need {
                    let pos = inbox.iter().position(|x| x == e).expect("checked");
                    inbox.remove(pos);
                }
                (t, need)
            };
            st.states.insert(machine.to_string(), t.to.clone());
            for a in &t.actions {
                if let Action::Emit { event, carries } = a {
                    let payload = match carries {
                        Some(c) => serde_json::json!({ "carries": c }),
                        None => Value::Null,
                    };
                    self.enqueue(st, event, payload, Some(machine));
                }
            }
            firings.push(Firing {
                machine: machine.to_string(),
                from: t.from.clone(),
                to: t.to.clone(),
                edge: t.edge.clone(),
                consumed,
                actions: t.actions.clone(),
            });
        }
    }

    /// Every machine rests in an accepting state.
    pub fn all_accepting(&self, net: &FsmNetwork, st: &NetworkState) -> bool {
        net.machines
            .iter()
            .all(|m| st.states.get(&m.id).is_some_and(|s| m.accepting.contains(s)))
    }
}

/// Exclusive choice among automatic transitions: a lone unguarded transition
/// is taken; otherwise exactly one guard must hold, or none with a default.
fn choose<'t>(
    machine: &str,
    state: &str,
    autos: &[&'t FsmTransition],
    ctx: &dyn DataContext,
) -> Result<&'t FsmTransition, GuardFault> {
    let fault = |reason: String| GuardFault {
        machine: machine.to_string(),
        state: state.to_string(),
        reason,
    };
    if let [t] = autos {
        if t.guard.is_none() && !t.is_default {
            return Ok(t);
        }
    }
    let mut holding = Vec::new();
    for t in autos.iter().filter(|t| !t.is_default) {
        let Some(g) = &t.guard else {
            holding.push(*t);
            continue;
        };
        match eval_guard(g, ctx) {
            Ok(true) => holding.push(*t),
            Ok(false) => {}
            Err(e) => return Err(fault(format!("guard `{g}`: {e}"))),
        }
    }
    match holding.as_slice() {
        [t] => Ok(t),
        [] => autos
            .iter()
            .copied()
            .find(|t| t.is_default)
            .ok_or_else(|| fault("no guard holds and there is no default flow".into())),
        many => Err(fault(format!("{} guards hold at once", many.len()))),
    }
}
