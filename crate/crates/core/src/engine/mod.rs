//! The monitor: a deterministic interpreter of deployed monitor programs.
//!
//! Every state change an instance undergoes is written to the ledger as a
//! transaction signed by the monitor key. Inputs from outside (deployments,
//! instance creation, task completions, aborts, stand-alone attestations)
//! carry the caller's own signature inside the payload, which is what lets
//! [`Monitor::replay`] rebuild identical state from the chain alone.

pub mod instance;
pub mod network;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::compiler::{Action, MonitorProgram, ScopeKind};
use crate::crypto::{self, SecretKey};
use crate::docstore::{attestation_message, Attestation, DocStore};
use crate::ledger::{Ledger, LedgerError, Tx};
use crate::{canonical, compiler};

pub use instance::{
    Consumption, DataEntry, Instance, InstanceStatus, ProcessedEvent, ScopeState, TaskInput, TaskOutput, TaskRequest,
    TaskState,
};
pub use network::{DeEvent, EmptyQueue, Firing, GuardFault, NetworkState, Runtime, StepOutcome};

/// Canonical metadata larger than this is refused.
pub const MAX_METADATA_BYTES: usize = 4096;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("program {0} is already deployed")]
    DuplicateProgram(String),
    #[error("bad signature")]
    BadSignature,
    #[error("bad public key for {0}")]
    BadKey(String),
    #[error("invalid program: {0}")]
    InvalidProgram(String),
    #[error("unknown program {0}")]
    UnknownProgram(String),
    #[error("no actor bound for lane {0}")]
    MissingActor(String),
    #[error("lane {0} is not an actor of the program")]
    UnexpectedActor(String),
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("instance is {0:?}, not Running")]
    NotRunning(InstanceStatus),
    #[error("event queue is empty")]
    EmptyQueue,
    #[error("{0}")]
    GuardFault(String),
    #[error("bad callback token")]
    BadToken,
    #[error("signer is not the actor bound to this task")]
    WrongActor,
    #[error("outputs do not match the task: missing {missing:?}, extra {extra:?}")]
    OutputMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("metadata for {0} exceeds 4 KiB")]
    MetadataTooLarge(String),
    #[error("unknown cid {0}")]
    UnknownCid(String),
    #[error("unknown scope {0}")]
    UnknownScope(String),
    #[error("scope {0} is not active")]
    ScopeNotActive(String),
    #[error("replay diverged at tx {index}: {message}")]
    ReplayDiverged { index: usize, message: String },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

/// What one engine operation did.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Effects {
    pub records: Vec<Tx>,
    pub new_tasks: Vec<TaskRequest>,
    pub emitted_events: Vec<DeEvent>,
    pub status_change: Option<InstanceStatus>,
    pub fault: Option<String>,
}

impl Effects {
    pub fn record_kinds(&self) -> Vec<&str> {
        self.records.iter().map(|t| t.method.as_str()).collect()
    }

    fn absorb(&mut self, other: Effects) {
        self.records.extend(other.records);
        self.new_tasks.extend(other.new_tasks);
        self.emitted_events.extend(other.emitted_events);
        if other.status_change.is_some() {
            self.status_change = other.status_change;
        }
        if other.fault.is_some() {
            self.fault = other.fault;
        }
    }
}

/// A signed output offered for a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OutputSubmission {
    pub name: String,
    pub cid: String,
    #[serde(default)]
    pub metadata: Map<String, Value>,
    /// Signature over the attestation of `(instance, name, version, cid)`.
    pub signature: String,
}

impl OutputSubmission {
    pub fn signed(
        key: &SecretKey,
        instance_id: &str,
        name: &str,
        version: u64,
        cid: &str,
        metadata: Map<String, Value>,
    ) -> Self {
        OutputSubmission {
            name: name.to_string(),
            cid: cid.to_string(),
            metadata,
            signature: crypto::sign_hex(key, &attestation_message(instance_id, name, version, cid)),
        }
    }
}

/// Bytes a deployer signs: the program id.
pub fn deploy_message(program_id: &str) -> Vec<u8> {
    program_id.as_bytes().to_vec()
}

pub fn creation_message(program_id: &str, bindings: &BTreeMap<String, String>) -> Vec<u8> {
    canonical::to_vec(&json!({ "actorBindings": bindings, "programId": program_id }))
}

pub fn abort_message(instance_id: &str, scope_id: &str, reason: &str) -> Vec<u8> {
    canonical::to_vec(&json!({
        "action": "abortScope",
        "instanceId": instance_id,
        "reason": reason,
        "scopeId": scope_id,
    }))
}

#[derive(Debug)]
pub struct Deployed {
    pub program: MonitorProgram,
    pub program_id: String,
    pub runtime: Runtime,
}

/// Signs and submits records.
struct Chain {
    key: SecretKey,
    public: String,
    ledger: Ledger,
}

impl Chain {
    fn record(&mut self, method: &str, payload: Value, fx: &mut Effects) -> Result<String> {
        let nonce = self.ledger.next_nonce(&self.public);
        let tx = Tx::sign(&self.key, method, nonce, payload);
        let id = tx.tx_id.clone();
        self.ledger.submit(tx.clone())?;
        fx.records.push(tx);
        Ok(id)
    }
}

pub struct Monitor {
    chain: Chain,
    docs: Arc<DocStore>,
    programs: BTreeMap<String, Arc<Deployed>>,
    instances: BTreeMap<String, Instance>,
    tokens: HashMap<String, (String, String)>,
    token_key: [u8; 32],
}

impl std::fmt::Debug for Monitor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Monitor")
            .field("public", &self.chain.public)
            .field("programs", &self.programs.len())
            .field("instances", &self.instances.len())
            .finish()
    }
}

impl Monitor {
    pub fn new(key: SecretKey, ledger: Ledger, docs: Arc<DocStore>) -> Monitor {
        let token_key = token_key(&key);
        Monitor {
            chain: Chain {
                public: crypto::public_hex(&key),
                key,
                ledger,
            },
            docs,
            programs: BTreeMap::new(),
            instances: BTreeMap::new(),
            tokens: HashMap::new(),
            token_key,
        }
    }

    pub fn public_key(&self) -> &str {
        &self.chain.public
    }

    pub fn ledger(&self) -> &Ledger {
        &self.chain.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.chain.ledger
    }

    pub fn docs(&self) -> &Arc<DocStore> {
        &self.docs
    }

    pub fn program(&self, program_id: &str) -> Option<&MonitorProgram> {
        self.programs.get(program_id).map(|d| &d.program)
    }

    pub fn program_ids(&self) -> impl Iterator<Item = &str> {
        self.programs.keys().map(String::as_str)
    }

    pub fn instance(&self, instance_id: &str) -> Option<&Instance> {
        self.instances.get(instance_id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.instances.values()
    }

    pub fn deploy_program(&mut self, program: MonitorProgram, deployer: &str, signature: &str) -> Result<String> {
        program
            .check()
            .map_err(|e| EngineError::InvalidProgram(e.to_string()))?;
        let program_id = program.program_id();
        if crypto::parse_public(deployer).is_none() {
            return Err(EngineError::BadKey("deployer".into()));
        }
        if !crypto::verify_hex(deployer, &deploy_message(&program_id), signature) {
            return Err(EngineError::BadSignature);
        }
        if self.programs.contains_key(&program_id) {
            return Err(EngineError::DuplicateProgram(program_id));
        }
        let payload = json!({
            "deployer": deployer,
            "program": canonical::to_value(&program),
            "programId": program_id,
            "signature": signature,
        });
        self.chain.record("DeployProgram", payload, &mut Effects::default())?;
        let runtime = Runtime::new(&program.network);
        self.programs.insert(
            program_id.clone(),
            Arc::new(Deployed {
                program,
                program_id: program_id.clone(),
                runtime,
            }),
        );
        Ok(program_id)
    }

    pub fn deploy_with_key(&mut self, program: MonitorProgram, key: &SecretKey) -> Result<String> {
        let sig = crypto::sign_hex(key, &deploy_message(&program.program_id()));
        self.deploy_program(program, &crypto::public_hex(key), &sig)
    }

    /// Bind actors and queue each lane's start event, in lane order. Nothing
    /// runs until the instance is stepped.
    pub fn create_instance(
        &mut self,
        program_id: &str,
        bindings: BTreeMap<String, String>,
        creator: &str,
        signature: &str,
    ) -> Result<String> {
        let d = self
            .programs
            .get(program_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownProgram(program_id.to_string()))?;
        for lane in &d.program.actors {
            let Some(pk) = bindings.get(lane) else {
                return Err(EngineError::MissingActor(lane.clone()));
            };
            if crypto::parse_public(pk).is_none() {
                return Err(EngineError::BadKey(lane.clone()));
            }
        }
        if let Some(extra) = bindings.keys().find(|l| !d.program.actors.contains(l)) {
            return Err(EngineError::UnexpectedActor(extra.clone()));
        }
        if crypto::parse_public(creator).is_none() {
            return Err(EngineError::BadKey("creator".into()));
        }
        if !crypto::verify_hex(creator, &creation_message(program_id, &bindings), signature) {
            return Err(EngineError::BadSignature);
        }
        let ordinal = self.instances.len();
        let instance_id = format!(
            "inst:{}",
            crypto::sha256_hex(&canonical::to_vec(&json!({
                "actorBindings": bindings,
                "creator": creator,
                "ordinal": ordinal,
                "programId": program_id,
            })))
        );
        let mut net = d.runtime.initial_state(&d.program.network);
        let mut lanes = d.program.actors.clone();
        lanes.sort();
        for lane in &lanes {
            d.runtime
                .enqueue(&mut net, &compiler::flatten::start_event(lane), Value::Null, None);
        }
        let payload = json!({
            "actorBindings": bindings,
            "creator": creator,
            "instanceId": instance_id,
            "programId": program_id,
            "signature": signature,
        });
        self.chain.record("InstanceCreated", payload, &mut Effects::default())?;
        self.instances.insert(
            instance_id.clone(),
            Instance {
                instance_id: instance_id.clone(),
                program_id: program_id.to_string(),
                actor_bindings: bindings,
                creator: creator.to_string(),
                status: InstanceStatus::Running,
                network: net,
                data: BTreeMap::new(),
                scopes: BTreeMap::new(),
                tasks: BTreeMap::new(),
                processed: Vec::new(),
                consumption: Vec::new(),
                fault: None,
            },
        );
        Ok(instance_id)
    }

    pub fn create_with_key(
        &mut self,
        program_id: &str,
        bindings: BTreeMap<String, String>,
        key: &SecretKey,
    ) -> Result<String> {
        let sig = crypto::sign_hex(key, &creation_message(program_id, &bindings));
        self.create_instance(program_id, bindings, &crypto::public_hex(key), &sig)
    }

    fn parts(&mut self, instance_id: &str) -> Result<(Arc<Deployed>, &mut Instance, &mut Chain, &[u8; 32])> {
        let inst = self
            .instances
            .get_mut(instance_id)
            .ok_or_else(|| EngineError::UnknownInstance(instance_id.to_string()))?;
        let d = self.programs[&inst.program_id].clone();
        Ok((d, inst, &mut self.chain, &self.token_key))
    }

    fn index_tokens(&mut self, fx: &Effects) {
        for t in &fx.new_tasks {
            self.tokens
                .insert(t.callback_token.clone(), (t.instance_id.clone(), t.task_id.clone()));
        }
    }

    /// Process the least queued event. A guard fault is recorded, faults the
    /// instance, and is returned as an error.
    pub fn step(&mut self, instance_id: &str) -> Result<Effects> {
        let (d, inst, chain, tk) = self.parts(instance_id)?;
        if inst.status != InstanceStatus::Running {
            return Err(EngineError::NotRunning(inst.status));
        }
        let mut fx = Effects::default();
        step_instance(&d, inst, chain, tk, &mut fx)?;
        self.index_tokens(&fx);
        match fx.fault.clone() {
            Some(f) => Err(EngineError::GuardFault(f)),
            None => Ok(fx),
        }
    }

    pub fn run_until_quiescent(&mut self, instance_id: &str) -> Result<InstanceStatus> {
        let (d, inst, chain, tk) = self.parts(instance_id)?;
        if inst.status != InstanceStatus::Running {
            return Err(EngineError::NotRunning(inst.status));
        }
        let mut fx = Effects::default();
        drain(&d, inst, chain, tk, &mut fx)?;
        let status = inst.status;
        self.index_tokens(&fx);
        match fx.fault {
            Some(f) => Err(EngineError::GuardFault(f)),
            None => Ok(status),
        }
    }

    /// As [`Monitor::run_until_quiescent`], returning the accumulated effects.
    pub fn drain(&mut self, instance_id: &str) -> Result<Effects> {
        let (d, inst, chain, tk) = self.parts(instance_id)?;
        let mut fx = Effects::default();
        if inst.status == InstanceStatus::Running {
            drain(&d, inst, chain, tk, &mut fx)?;
        }
        self.index_tokens(&fx);
        Ok(fx)
    }

    pub fn pending_tasks(&self, instance_id: &str) -> Result<Vec<TaskRequest>> {
        self.instances
            .get(instance_id)
            .map(Instance::pending_tasks)
            .ok_or_else(|| EngineError::UnknownInstance(instance_id.to_string()))
    }

    pub fn task_by_token(&self, token: &str) -> Option<(&str, &str)> {
        self.tokens.get(token).map(|(i, t)| (i.as_str(), t.as_str()))
    }

    pub fn complete_task(
        &mut self,
        instance_id: &str,
        task_id: &str,
        token: &str,
        outputs: Vec<OutputSubmission>,
        signer: &str,
    ) -> Result<Effects> {
        let inst = self
            .instances
            .get(instance_id)
            .ok_or_else(|| EngineError::UnknownInstance(instance_id.to_string()))?;
        if inst.status != InstanceStatus::Running {
            return Err(EngineError::NotRunning(inst.status));
        }
        let task = inst.tasks.get(task_id).ok_or(EngineError::BadToken)?;
        if !task.state.is_live() || !constant_time_eq(task.callback_token.as_bytes(), token.as_bytes()) {
            return Err(EngineError::BadToken);
        }
        self.apply_completion(instance_id, task_id, outputs, signer)
    }

    /// Completion addressed by token alone, as an off-chain callback does.
    pub fn complete_by_token(&mut self, token: &str, outputs: Vec<OutputSubmission>, signer: &str) -> Result<Effects> {
        let (iid, tid) = self.tokens.get(token).cloned().ok_or(EngineError::BadToken)?;
        self.complete_task(&iid, &tid, token, outputs, signer)
    }

    fn apply_completion(
        &mut self,
        instance_id: &str,
        task_id: &str,
        outputs: Vec<OutputSubmission>,
        signer: &str,
    ) -> Result<Effects> {
        let docs = self.docs.clone();
        let (d, inst, chain, tk) = self.parts(instance_id)?;
        if inst.status != InstanceStatus::Running {
            return Err(EngineError::NotRunning(inst.status));
        }
        let task = inst.tasks.get(task_id).ok_or(EngineError::BadToken)?;
        if !task.state.is_live() {
            return Err(EngineError::BadToken);
        }
        if inst.actor_bindings.get(&task.lane).map(String::as_str) != Some(signer) {
            return Err(EngineError::WrongActor);
        }
        let flow = d
            .program
            .task_flow(task_id)
            .ok_or_else(|| EngineError::InvalidProgram(format!("no dataflow for {task_id}")))?;
        let declared: BTreeSet<&str> = flow.outputs.iter().map(String::as_str).collect();
        let given: Vec<&str> = outputs.iter().map(|o| o.name.as_str()).collect();
        let given_set: BTreeSet<&str> = given.iter().copied().collect();
        if given_set != declared || given.len() != given_set.len() {
            let mut extra: Vec<String> = given_set.difference(&declared).map(|s| s.to_string()).collect();
            if given.len() != given_set.len() {
                extra.extend(
                    given
                        .iter()
                        .filter(|n| given.iter().filter(|m| m == n).count() > 1)
                        .map(|s| s.to_string()),
                );
                extra.dedup();
            }
            return Err(EngineError::OutputMismatch {
                missing: declared.difference(&given_set).map(|s| s.to_string()).collect(),
                extra,
            });
        }
        for o in &outputs {
            if canonical::to_vec(&o.metadata).len() > MAX_METADATA_BYTES {
                return Err(EngineError::MetadataTooLarge(o.name.clone()));
            }
            if !docs.contains(&o.cid) {
                return Err(EngineError::UnknownCid(o.cid.clone()));
            }
            let version = inst.next_version(&o.name);
            if !crypto::verify_hex(
                signer,
                &attestation_message(instance_id, &o.name, version, &o.cid),
                &o.signature,
            ) {
                return Err(EngineError::BadSignature);
            }
        }

        let mut outputs = outputs;
        outputs.sort_by(|a, b| a.name.cmp(&b.name));
        let mut fx = Effects::default();
        let listed: Vec<Value> = outputs
            .iter()
            .map(|o| {
                json!({
                    "cid": o.cid,
                    "metadata": o.metadata,
                    "name": o.name,
                    "signature": o.signature,
                    "version": inst.next_version(&o.name),
                })
            })
            .collect();
        chain.record(
            "TaskCompleted",
            json!({
                "actor": signer,
                "instanceId": instance_id,
                "outputs": listed,
                "taskId": task_id,
            }),
            &mut fx,
        )?;
        for o in outputs {
            let version = inst.next_version(&o.name);
            let tx_id = chain.record(
                "Attestation",
                json!({
                    "author": signer,
                    "cid": o.cid,
                    "dataObjectName": o.name,
                    "instanceId": instance_id,
                    "signature": o.signature,
                    "taskId": task_id,
                    "version": version,
                }),
                &mut fx,
            )?;
            inst.data.entry(o.name.clone()).or_default().push(DataEntry {
                cid: o.cid,
                metadata: o.metadata,
                version,
                author: signer.to_string(),
                signature: o.signature,
                attestation_tx_id: tx_id,
                task_id: Some(task_id.to_string()),
            });
        }
        inst.tasks.get_mut(task_id).expect("checked").state = TaskState::Done;
        let ev = compiler::flatten::complete_event(task_id);
        d.runtime
            .enqueue(&mut inst.network, &ev, json!({ "taskId": task_id }), None);
        drain(&d, inst, chain, tk, &mut fx)?;
        self.index_tokens(&fx);
        Ok(fx)
    }

    /// Attest a new version of a data object outside any task.
    pub fn attest(
        &mut self,
        instance_id: &str,
        data_object_name: &str,
        cid: &str,
        author: &str,
        signature: &str,
    ) -> Result<Attestation> {
        let docs = self.docs.clone();
        let (_, inst, chain, _) = self.parts(instance_id)?;
        if !inst.actor_bindings.values().any(|k| k == author) {
            return Err(EngineError::WrongActor);
        }
        if !docs.contains(cid) {
            return Err(EngineError::UnknownCid(cid.to_string()));
        }
        let version = inst.next_version(data_object_name);
        let att = Attestation {
            instance_id: instance_id.to_string(),
            data_object_name: data_object_name.to_string(),
            version,
            cid: cid.to_string(),
            author: author.to_string(),
            signature: signature.to_string(),
        };
        if !att.signature_verifies(author) {
            return Err(EngineError::BadSignature);
        }
        let tx_id = chain.record("Attestation", canonical::to_value(&att), &mut Effects::default())?;
        let metadata = inst
            .latest(data_object_name)
            .map(|e| e.metadata.clone())
            .unwrap_or_default();
        inst.data
            .entry(data_object_name.to_string())
            .or_default()
            .push(DataEntry {
                cid: cid.to_string(),
                metadata,
                version,
                author: author.to_string(),
                signature: signature.to_string(),
                attestation_tx_id: tx_id,
                task_id: None,
            });
        Ok(att)
    }

    /// All attested versions of a data object, oldest first.
    pub fn attestations(&self, instance_id: &str, data_object_name: &str) -> Vec<Attestation> {
        let Some(inst) = self.instances.get(instance_id) else {
            return Vec::new();
        };
        inst.data
            .get(data_object_name)
            .into_iter()
            .flatten()
            .map(|e| Attestation {
                instance_id: instance_id.to_string(),
                data_object_name: data_object_name.to_string(),
                version: e.version,
                cid: e.cid.clone(),
                author: e.author.clone(),
                signature: e.signature.clone(),
            })
            .collect()
    }

    pub fn abort_scope(
        &mut self,
        instance_id: &str,
        scope_id: &str,
        reason: &str,
        actor: &str,
        signature: &str,
    ) -> Result<Effects> {
        let (d, inst, chain, _) = self.parts(instance_id)?;
        let scope = d
            .program
            .scope(scope_id)
            .ok_or_else(|| EngineError::UnknownScope(scope_id.to_string()))?;
        if inst.status != InstanceStatus::Running {
            return Err(EngineError::NotRunning(inst.status));
        }
        if inst.scopes.get(scope_id) != Some(&ScopeState::Active) {
            return Err(EngineError::ScopeNotActive(scope_id.to_string()));
        }
        if !scope
            .participating_lanes
            .iter()
            .any(|l| inst.actor_bindings.get(l).map(String::as_str) == Some(actor))
        {
            return Err(EngineError::WrongActor);
        }
        if !crypto::verify_hex(actor, &abort_message(instance_id, scope_id, reason), signature) {
            return Err(EngineError::BadSignature);
        }
        let mut fx = Effects::default();
        let payload = |cancelled: &[String]| {
            json!({
                "actor": actor,
                "cancelledTasks": cancelled,
                "instanceId": instance_id,
                "reason": reason,
                "scopeId": scope_id,
                "signature": signature,
            })
        };
        match scope.kind {
            ScopeKind::Top => {
                let cancelled = cancel_tasks(inst, |_| true);
                for s in inst.scopes.values_mut().filter(|s| **s == ScopeState::Active) {
                    *s = ScopeState::Aborted;
                }
                inst.network.queue.clear();
                chain.record("ScopeAborted", payload(&cancelled), &mut fx)?;
                chain.record(
                    "InstanceAborted",
                    json!({ "instanceId": instance_id, "scopeId": scope_id }),
                    &mut fx,
                )?;
                inst.status = InstanceStatus::Aborted;
                fx.status_change = Some(InstanceStatus::Aborted);
            }
            ScopeKind::Nested => {
                let inside = instance::machines_inside(&d.program, scope);
                let enclosing = instance::enclosing_machine(&d.program, scope_id).map(str::to_string);
                let cancelled = cancel_tasks(inst, |t| scope.contains(&t.task_id));
                let stopped: BTreeSet<&str> = inside.iter().map(String::as_str).chain(enclosing.as_deref()).collect();
                inst.network.queue.retain(|e| {
                    !d.runtime
                        .consumers_of(&e.name)
                        .iter()
                        .all(|c| stopped.contains(c.as_str()))
                });
                for m in &inside {
                    inst.network.states.insert(m.clone(), "cancelled".into());
                    inst.network.inbox.remove(m);
                }
                if let Some(m) = &enclosing {
                    inst.network.states.insert(m.clone(), "faulted".into());
                }
                for s in d
                    .program
                    .scopes
                    .iter()
                    .filter(|s| is_within(&d.program, &s.id, scope_id))
                {
                    if let Some(st) = inst.scopes.get_mut(&s.id) {
                        if *st == ScopeState::Active {
                            *st = ScopeState::Aborted;
                        }
                    }
                }
                chain.record("ScopeAborted", payload(&cancelled), &mut fx)?;
                fault(inst, chain, format!("scope {scope_id} aborted: {reason}"), &mut fx)?;
            }
        }
        Ok(fx)
    }

    pub fn abort_with_key(
        &mut self,
        instance_id: &str,
        scope_id: &str,
        reason: &str,
        key: &SecretKey,
    ) -> Result<Effects> {
        let sig = crypto::sign_hex(key, &abort_message(instance_id, scope_id, reason));
        self.abort_scope(instance_id, scope_id, reason, &crypto::public_hex(key), &sig)
    }

    pub fn snapshot(&self, instance_id: &str) -> Option<Value> {
        self.instances.get(instance_id).map(Instance::snapshot)
    }

    /// Snapshots of every instance, keyed by id.
    pub fn snapshots(&self) -> BTreeMap<String, Value> {
        self.instances.iter().map(|(k, v)| (k.clone(), v.snapshot())).collect()
    }

    /// True when the next step would change machine states only, writing no
    /// record.
    fn next_step_is_silent(&self, instance_id: &str) -> bool {
        let Some(inst) = self.instances.get(instance_id) else {
            return false;
        };
        if inst.status != InstanceStatus::Running || inst.network.queue.is_empty() {
            return false;
        }
        let d = &self.programs[&inst.program_id];
        let mut probe = inst.network.clone();
        let Ok(out) = d.runtime.step(&d.program.network, &mut probe, &inst.guard_context()) else {
            return false;
        };
        let writes = out.fault.is_some()
            || out.firings.iter().flat_map(|f| &f.actions).any(|a| {
                matches!(
                    a,
                    Action::OpenScope { .. } | Action::CommitScope { .. } | Action::RequestTask { .. }
                )
            })
            || (probe.queue.is_empty() && d.runtime.all_accepting(&d.program.network, &probe));
        !writes
    }

    fn settle_silent(&mut self, instance_id: &str) -> Result<()> {
        while self.next_step_is_silent(instance_id) {
            self.step(instance_id)?;
        }
        Ok(())
    }

    /// Rebuild a monitor from a transaction log written by one with the same
    /// key. Input records are re-applied; derived records must then come out
    /// identical, or replay fails. Instances left with queued events are run
    /// to quiescence at the end, which completes an operation cut short by a
    /// crash.
    pub fn replay(key: SecretKey, docs: Arc<DocStore>, txs: &[Tx], batch_size: usize) -> Result<Monitor> {
        let mut m = Monitor::new(key, Ledger::in_memory(batch_size), docs);
        let diverged = |index: usize, message: String| EngineError::ReplayDiverged { index, message };
        for (i, tx) in txs.iter().enumerate() {
            if m.chain.ledger.tx_count() <= i {
                if !tx.verify() || tx.caller != m.chain.public {
                    return Err(diverged(i, "record not signed by this monitor".into()));
                }
                m.reapply(i, tx)?;
            }
            let got = m.chain.ledger.txs().nth(i).map(|t| t.tx_id.clone());
            if got.as_deref() != Some(tx.tx_id.as_str()) {
                return Err(diverged(
                    i,
                    format!("expected {} {}, produced {:?}", tx.method, tx.tx_id, got),
                ));
            }
        }
        let running: Vec<String> = m
            .instances
            .values()
            .filter(|i| i.status == InstanceStatus::Running && !i.network.queue.is_empty())
            .map(|i| i.instance_id.clone())
            .collect();
        for iid in running {
            m.drain(&iid)?;
        }
        Ok(m)
    }

    fn reapply(&mut self, i: usize, tx: &Tx) -> Result<()> {
        let p = &tx.payload;
        let s = |k: &str| p.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
        let diverged = |message: String| EngineError::ReplayDiverged { index: i, message };
        let iid = s("instanceId");
        match tx.method.as_str() {
            "DeployProgram" => {
                let program: MonitorProgram =
                    serde_json::from_value(p["program"].clone()).map_err(|e| diverged(e.to_string()))?;
                self.deploy_program(program, &s("deployer"), &s("signature"))?;
            }
            "InstanceCreated" => {
                let bindings: BTreeMap<String, String> =
                    serde_json::from_value(p["actorBindings"].clone()).map_err(|e| diverged(e.to_string()))?;
                self.create_instance(&s("programId"), bindings, &s("creator"), &s("signature"))?;
            }
            "TaskCompleted" => {
                self.settle_silent(&iid)?;
                let outputs: Vec<OutputSubmission> =
                    serde_json::from_value(p["outputs"].clone()).map_err(|e| diverged(e.to_string()))?;
                self.apply_completion(&iid, &s("taskId"), outputs, &s("actor"))?;
            }
            "ScopeAborted" => {
                self.settle_silent(&iid)?;
                self.abort_scope(&iid, &s("scopeId"), &s("reason"), &s("actor"), &s("signature"))?;
            }
            "Attestation" if p.get("taskId").is_none() => {
                self.settle_silent(&iid)?;
                self.attest(&iid, &s("dataObjectName"), &s("cid"), &s("author"), &s("signature"))?;
            }
            _ => {
                // Derived by stepping the instance.
                while self.chain.ledger.tx_count() <= i {
                    match self.step(&iid) {
                        Ok(_) | Err(EngineError::GuardFault(_)) => {}
                        Err(e) => return Err(diverged(format!("{} not reproduced: {e}", tx.method))),
                    }
                }
            }
        }
        Ok(())
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Scope `inner` is `outer` or nested somewhere below it.
fn is_within(program: &MonitorProgram, inner: &str, outer: &str) -> bool {
    let mut cur = Some(inner);
    while let Some(id) = cur {
        if id == outer {
            return true;
        }
        cur = program.scope(id).and_then(|s| s.parent.as_deref());
    }
    false
}

fn cancel_tasks(inst: &mut Instance, pick: impl Fn(&TaskRequest) -> bool) -> Vec<String> {
    let mut out = Vec::new();
    for t in inst.tasks.values_mut() {
        if t.state.is_live() && pick(t) {
            t.state = TaskState::Cancelled;
            out.push(t.task_id.clone());
        }
    }
    out
}

fn fault(inst: &mut Instance, chain: &mut Chain, reason: String, fx: &mut Effects) -> Result<()> {
    cancel_tasks(inst, |_| true);
    inst.network.queue.clear();
    chain.record(
        "InstanceFaulted",
        json!({ "instanceId": inst.instance_id, "reason": reason }),
        fx,
    )?;
    inst.status = InstanceStatus::Faulted;
    inst.fault = Some(reason.clone());
    fx.status_change = Some(InstanceStatus::Faulted);
    fx.fault = Some(reason);
    Ok(())
}

fn drain(d: &Deployed, inst: &mut Instance, chain: &mut Chain, tk: &[u8; 32], fx: &mut Effects) -> Result<()> {
    while inst.status == InstanceStatus::Running && !inst.network.queue.is_empty() {
        step_instance(d, inst, chain, tk, fx)?;
    }
    Ok(())
}

fn step_instance(d: &Deployed, inst: &mut Instance, chain: &mut Chain, tk: &[u8; 32], fx: &mut Effects) -> Result<()> {
    let seq_before = inst.network.next_seq;
    let ctx = inst.guard_context();
    let out = d
        .runtime
        .step(&d.program.network, &mut inst.network, &ctx)
        .map_err(|_| EngineError::EmptyQueue)?;
    inst.processed.push(ProcessedEvent {
        seq: out.event.seq,
        name: out.event.name.clone(),
        consumers: out.consumers.clone(),
    });
    let mut local = Effects {
        emitted_events: inst
            .network
            .queue
            .iter()
            .filter(|e| e.seq >= seq_before)
            .cloned()
            .collect(),
        ..Effects::default()
    };
    for f in &out.firings {
        for e in &f.consumed {
            inst.consumption.push(Consumption {
                event: e.clone(),
                machine: f.machine.clone(),
            });
        }
        for a in &f.actions {
            apply_action(d, inst, chain, tk, &f.machine, a, &mut local)?;
        }
    }
    if let Some(g) = out.fault {
        fault(inst, chain, g.to_string(), &mut local)?;
    } else if inst.network.queue.is_empty() && d.runtime.all_accepting(&d.program.network, &inst.network) {
        chain.record(
            "InstanceCompleted",
            json!({ "instanceId": inst.instance_id }),
            &mut local,
        )?;
        inst.status = InstanceStatus::Completed;
        local.status_change = Some(InstanceStatus::Completed);
    }
    fx.absorb(local);
    Ok(())
}

fn apply_action(
    d: &Deployed,
    inst: &mut Instance,
    chain: &mut Chain,
    tk: &[u8; 32],
    machine: &str,
    action: &Action,
    fx: &mut Effects,
) -> Result<()> {
    let iid = inst.instance_id.clone();
    match action {
        Action::OpenScope { scope } => {
            inst.scopes.insert(scope.clone(), ScopeState::Active);
            chain.record("ScopeOpened", json!({ "instanceId": iid, "scopeId": scope }), fx)?;
        }
        Action::CommitScope { scope } => {
            inst.scopes.insert(scope.clone(), ScopeState::Committed);
            chain.record("ScopeCommitted", json!({ "instanceId": iid, "scopeId": scope }), fx)?;
        }
        Action::RequestTask { task } => {
            let flow = d
                .program
                .task_flow(task)
                .ok_or_else(|| EngineError::InvalidProgram(format!("no dataflow for {task}")))?;
            let inputs: Vec<TaskInput> = flow
                .inputs
                .iter()
                .map(|n| {
                    let latest = inst.latest(n);
                    TaskInput {
                        name: n.clone(),
                        cid: latest.map(|e| e.cid.clone()),
                        version: latest.map(|e| e.version),
                    }
                })
                .collect();
            let req = TaskRequest {
                instance_id: iid.clone(),
                task_id: task.clone(),
                task_name: flow.name.clone(),
                lane: flow.lane.clone(),
                machine: machine.to_string(),
                purpose: flow.purpose.clone(),
                inputs: inputs.clone(),
                outputs: flow
                    .outputs
                    .iter()
                    .map(|n| TaskOutput {
                        name: n.clone(),
                        version: inst.next_version(n),
                    })
                    .collect(),
                callback_token: callback_token(tk, &iid, task),
                state: TaskState::Pending,
            };
            chain.record(
                "TaskRequested",
                json!({
                    "inputs": inputs,
                    "instanceId": iid,
                    "machine": machine,
                    "taskId": task,
                    "taskName": flow.name,
                }),
                fx,
            )?;
            inst.tasks.insert(task.clone(), req.clone());
            fx.new_tasks.push(req);
        }
        Action::Emit { .. } | Action::Finish => {}
    }
    Ok(())
}

/// Token secret derived from the monitor key, so replay reissues the same
/// tokens without storing them anywhere.
fn token_key(key: &SecretKey) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"bpmnchain callback token\0");
    h.update(key.to_bytes());
    h.finalize().into()
}

/// Each task is requested at most once per instance, so the pair names it.
fn callback_token(token_key: &[u8; 32], instance_id: &str, task_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(token_key);
    h.update(instance_id.as_bytes());
    h.update([0]);
    h.update(task_id.as_bytes());
    hex::encode(h.finalize())
}
