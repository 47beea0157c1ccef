#![allow(dead_code)]

use std::path::PathBuf;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(fixture_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

use std::collections::BTreeMap;
use std::sync::Arc;

use bpmnchain::compiler::compile;
use bpmnchain::crypto::{key_from_seed, public_hex, SecretKey};
use bpmnchain::docstore::DocStore;
use bpmnchain::engine::{Effects, EngineError, Monitor, OutputSubmission};
use bpmnchain::ledger::Ledger;
use serde_json::{Map, Value};

/// One deployed program with one instance, keys derived from lane names.
pub struct Harness {
    pub monitor: Monitor,
    pub keys: BTreeMap<String, SecretKey>,
    pub program_id: String,
    pub iid: String,
}

impl Harness {
    pub fn new(model: &str) -> Harness {
        let compiled = compile(&fixture(model)).expect("fixture compiles");
        let program = compiled.program;
        let mut monitor = Monitor::new(
            key_from_seed("monitor"),
            Ledger::in_memory(1),
            Arc::new(DocStore::in_memory()),
        );
        let keys: BTreeMap<String, SecretKey> = program
            .actors
            .iter()
            .map(|l| (l.clone(), key_from_seed(&format!("actor:{l}"))))
            .collect();
        let bindings = keys.iter().map(|(l, k)| (l.clone(), public_hex(k))).collect();
        let program_id = monitor.deploy_with_key(program, &key_from_seed("deployer")).unwrap();
        let iid = monitor
            .create_with_key(&program_id, bindings, &key_from_seed("creator"))
            .unwrap();
        Harness {
            monitor,
            keys,
            program_id,
            iid,
        }
    }

    pub fn started(model: &str) -> Harness {
        let mut h = Harness::new(model);
        h.monitor.run_until_quiescent(&h.iid).unwrap();
        h
    }

    pub fn pending(&self) -> Vec<String> {
        self.monitor
            .pending_tasks(&self.iid)
            .unwrap()
            .into_iter()
            .map(|t| t.task_id)
            .collect()
    }

    /// Signed outputs for a pending task. Document bytes name the task and
    /// object so every cid is distinct.
    pub fn outputs(&self, task: &str, meta: &BTreeMap<&str, Value>) -> (String, Vec<OutputSubmission>, String) {
        let req = self
            .monitor
            .pending_tasks(&self.iid)
            .unwrap()
            .into_iter()
            .find(|t| t.task_id == task)
            .unwrap_or_else(|| panic!("{task} is not pending; pending {:?}", self.pending()));
        let key = &self.keys[&req.lane];
        let outs = req
            .outputs
            .iter()
            .map(|o| {
                let cid = self
                    .monitor
                    .docs()
                    .put(format!("{task}/{}/v{}", o.name, o.version).as_bytes())
                    .unwrap();
                let metadata: Map<String, Value> = match meta.get(o.name.as_str()) {
                    Some(Value::Object(m)) => m.clone(),
                    _ => Map::new(),
                };
                OutputSubmission::signed(key, &self.iid, &o.name, o.version, &cid, metadata)
            })
            .collect();
        (req.callback_token, outs, public_hex(key))
    }

    pub fn try_complete(&mut self, task: &str) -> Result<Effects, EngineError> {
        self.try_complete_with(task, &BTreeMap::new())
    }

    pub fn try_complete_with(&mut self, task: &str, meta: &BTreeMap<&str, Value>) -> Result<Effects, EngineError> {
        let (token, outs, signer) = self.outputs(task, meta);
        let iid = self.iid.clone();
        self.monitor.complete_task(&iid, task, &token, outs, &signer)
    }

    pub fn complete(&mut self, task: &str) -> Effects {
        self.try_complete(task)
            .unwrap_or_else(|e| panic!("completing {task}: {e}"))
    }

    pub fn record_kinds(&self) -> Vec<String> {
        self.monitor.ledger().txs().map(|t| t.method.clone()).collect()
    }
}
