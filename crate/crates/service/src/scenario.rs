//! Scripted runs against an in-process monitor, for demos and end-to-end
//! checks. A scenario is JSON:
//!
//! ```json
//! {"steps": [
//!   {"completeTask": {"taskName": "RecAgr",
//!                     "outputFiles": {"SalesAgr": "docs/agreement.txt"},
//!                     "metadata": {"SalesAgr": {"price": 52000}}}},
//!   {"expectPending": ["GetTrReq"]},
//!   {"abortScope": {"scopeId": "Seller", "reason": "buyer withdrew"}},
//!   {"expectStatus": "Aborted"}
//! ]}
//! ```
//!
//! Output files are read relative to the scenario file. An output without a
//! file gets placeholder bytes naming the task and object.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use bpmnchain::compiler::MonitorProgram;
use bpmnchain::crypto::{key_from_seed, public_hex, sign_hex, SecretKey};
use bpmnchain::docstore::DocStore;
use bpmnchain::engine::{abort_message, InstanceStatus, Monitor, OutputSubmission};
use bpmnchain::ledger::{Ledger, Tx};
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::keys;

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Step {
    #[serde(rename_all = "camelCase")]
    CompleteTask {
        task_name: String,
        #[serde(default)]
        output_files: BTreeMap<String, PathBuf>,
        #[serde(default)]
        metadata: BTreeMap<String, Map<String, Value>>,
    },
    #[serde(rename_all = "camelCase")]
    AbortScope {
        scope_id: String,
        #[serde(default)]
        reason: String,
        /// Lane whose key signs; defaults to the first lane in the scope.
        #[serde(default)]
        actor: Option<String>,
    },
    ExpectStatus(InstanceStatus),
    ExpectPending(Vec<String>),
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Where a run stopped agreeing with its script.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    /// 1-based.
    pub step: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct RunReport {
    pub instance_id: String,
    pub monitor: Monitor,
    pub trace: Vec<String>,
    pub divergence: Option<Divergence>,
}

impl RunReport {
    pub fn chain_ndjson(&self) -> String {
        self.monitor.ledger().to_ndjson()
    }

    pub fn exit_code(&self) -> i32 {
        if self.divergence.is_some() {
            2
        } else {
            0
        }
    }
}

/// Keys for a run: `<lane>.key` per actor, plus `monitor.key` if present.
pub struct RunKeys {
    pub monitor: SecretKey,
    pub actors: BTreeMap<String, SecretKey>,
}

impl RunKeys {
    pub fn load(dir: &Path, program: &MonitorProgram) -> Result<RunKeys> {
        let monitor_path = keys::key_path(dir, "monitor");
        let monitor = if monitor_path.exists() {
            keys::read_key(&monitor_path)?
        } else {
            key_from_seed("bpmnchain scenario monitor")
        };
        let actors = program
            .actors
            .iter()
            .map(|lane| Ok((lane.clone(), keys::read_key(&keys::key_path(dir, lane))?)))
            .collect::<Result<_>>()?;
        Ok(RunKeys { monitor, actors })
    }
}

fn describe(tx: &Tx) -> String {
    let p = &tx.payload;
    let s = |k: &str| p.get(k).and_then(Value::as_str);
    let detail = match tx.method.as_str() {
        "DeployProgram" => s("programId").map(str::to_string),
        "InstanceCreated" => s("instanceId").map(str::to_string),
        "TaskRequested" | "TaskCompleted" => s("taskId").map(str::to_string),
        "Attestation" => Some(format!(
            "{} v{} {}",
            s("dataObjectName").unwrap_or("?"),
            p.get("version").and_then(Value::as_u64).unwrap_or(0),
            s("cid").unwrap_or("?")
        )),
        "ScopeOpened" | "ScopeCommitted" | "InstanceAborted" => s("scopeId").map(str::to_string),
        "ScopeAborted" => Some(format!(
            "{} ({})",
            s("scopeId").unwrap_or("?"),
            s("reason").unwrap_or("")
        )),
        "InstanceFaulted" => s("reason").map(str::to_string),
        _ => None,
    };
    match detail {
        Some(d) => format!("  #{} {} {}", tx.nonce, tx.method, d),
        None => format!("  #{} {}", tx.nonce, tx.method),
    }
}

struct Runner<'a> {
    m: Monitor,
    iid: String,
    keys: &'a RunKeys,
    base: &'a Path,
    trace: Vec<String>,
    seen: usize,
}

impl Runner<'_> {
    fn log_new_records(&mut self) {
        let txs: Vec<String> = self.m.ledger().txs().skip(self.seen).map(describe).collect();
        self.seen += txs.len();
        self.trace.extend(txs);
    }

    fn status(&self) -> InstanceStatus {
        self.m
            .instance(&self.iid)
            .map(|i| i.status)
            .unwrap_or(InstanceStatus::Faulted)
    }

    fn pending_names(&self) -> BTreeSet<String> {
        self.m
            .pending_tasks(&self.iid)
            .unwrap_or_default()
            .into_iter()
            .map(|t| t.task_name)
            .collect()
    }

    fn step(&mut self, step: &Step) -> Result<(), String> {
        match step {
            Step::CompleteTask {
                task_name,
                output_files,
                metadata,
            } => {
                let pending = self.m.pending_tasks(&self.iid).map_err(|e| e.to_string())?;
                let req = pending
                    .into_iter()
                    .find(|t| &t.task_name == task_name || &t.task_id == task_name)
                    .ok_or_else(|| format!("{task_name} is not pending; pending {:?}", self.pending_names()))?;
                let key = &self.keys.actors[&req.lane];
                let mut outputs = Vec::new();
                for o in &req.outputs {
                    let bytes = match output_files.get(&o.name) {
                        Some(f) => {
                            let path = self.base.join(f);
                            std::fs::read(&path).map_err(|e| format!("reading {}: {e}", path.display()))?
                        }
                        None => format!("{}:{}", req.task_id, o.name).into_bytes(),
                    };
                    let cid = self.m.docs().put(&bytes).map_err(|e| e.to_string())?;
                    let meta = metadata.get(&o.name).cloned().unwrap_or_default();
                    outputs.push(OutputSubmission::signed(key, &self.iid, &o.name, o.version, &cid, meta));
                }
                let iid = self.iid.clone();
                self.m
                    .complete_task(&iid, &req.task_id, &req.callback_token, outputs, &public_hex(key))
                    .map_err(|e| format!("completing {task_name}: {e}"))?;
                Ok(())
            }
            Step::AbortScope {
                scope_id,
                reason,
                actor,
            } => {
                let lane = match actor {
                    Some(l) => l.clone(),
                    None => {
                        let pid = self
                            .m
                            .instance(&self.iid)
                            .map(|i| i.program_id.clone())
                            .unwrap_or_default();
                        self.m
                            .program(&pid)
                            .and_then(|p| p.scope(scope_id))
                            .and_then(|s| s.participating_lanes.first().cloned())
                            .ok_or_else(|| format!("unknown scope {scope_id}"))?
                    }
                };
                let key = self
                    .keys
                    .actors
                    .get(&lane)
                    .ok_or_else(|| format!("no key for lane {lane}"))?;
                let sig = sign_hex(key, &abort_message(&self.iid, scope_id, reason));
                let iid = self.iid.clone();
                self.m
                    .abort_scope(&iid, scope_id, reason, &public_hex(key), &sig)
                    .map_err(|e| format!("aborting {scope_id}: {e}"))?;
                Ok(())
            }
            Step::ExpectStatus(want) => {
                let got = self.status();
                if got == *want {
                    Ok(())
                } else {
                    Err(format!("expected status {want:?}, found {got:?}"))
                }
            }
            Step::ExpectPending(want) => {
                let want: BTreeSet<String> = want.iter().cloned().collect();
                let got = self.pending_names();
                if got == want {
                    Ok(())
                } else {
                    Err(format!("expected pending {want:?}, found {got:?}"))
                }
            }
        }
    }
}

fn step_label(step: &Step) -> String {
    match step {
        Step::CompleteTask { task_name, .. } => format!("completeTask {task_name}"),
        Step::AbortScope { scope_id, .. } => format!("abortScope {scope_id}"),
        Step::ExpectStatus(s) => format!("expectStatus {s:?}"),
        Step::ExpectPending(p) => format!("expectPending {p:?}"),
    }
}

/// Deploy `program`, create one instance and play the script. `base` is the
/// directory output files are resolved against. Errors are setup failures;
/// a script that does not hold is reported as a divergence.
pub fn run(
    program: MonitorProgram,
    scenario: &Scenario,
    base: &Path,
    keys: &RunKeys,
    batch: usize,
) -> Result<RunReport> {
    let mut m = Monitor::new(
        keys.monitor.clone(),
        Ledger::in_memory(batch),
        Arc::new(DocStore::in_memory()),
    );
    let pid = m.deploy_with_key(program, &keys.monitor)?;
    let bindings = keys.actors.iter().map(|(l, k)| (l.clone(), public_hex(k))).collect();
    let iid = m.create_with_key(&pid, bindings, &keys.monitor)?;
    m.run_until_quiescent(&iid)
        .map_err(|e| anyhow!("starting instance: {e}"))?;
    let mut r = Runner {
        m,
        iid,
        keys,
        base,
        trace: vec![format!("scenario {}", scenario.name), "[setup]".to_string()],
        seen: 0,
    };
    r.log_new_records();
    let mut divergence = None;
    for (i, step) in scenario.steps.iter().enumerate() {
        r.trace.push(format!("[step {}] {}", i + 1, step_label(step)));
        let result = r.step(step);
        r.log_new_records();
        if let Err(message) = result {
            r.trace.push(format!("  DIVERGED: {message}"));
            divergence = Some(Divergence { step: i + 1, message });
            break;
        }
    }
    r.m.ledger_mut().seal()?;
    r.trace.push(format!(
        "[end] status {:?}, {} records, head {}",
        r.status(),
        r.m.ledger().tx_count(),
        r.m.ledger().head_hash()
    ));
    Ok(RunReport {
        instance_id: r.iid,
        monitor: r.m,
        trace: r.trace,
        divergence,
    })
}
