//! Shared service state: the monitor behind one lock, its data directory,
//! and the webhook bridge.
//!
//! Layout of the data directory:
//! `chain.ndjson` (+ `.open` journal), `docs/`, `monitor.key`, `webhooks.json`.
//! Nothing else is needed on restart: the chain is replayed into a fresh
//! monitor, which reissues the same callback tokens.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use anyhow::{bail, Context, Result};
use bpmnchain::crypto::SecretKey;
use bpmnchain::docstore::DocStore;
use bpmnchain::engine::{Monitor, TaskRequest};
use bpmnchain::ledger::{verify_blocks, Ledger, Tx};
use bpmnchain_bridge::{complete_inline, Bridge, HttpTransport, Registered, WebhookRegistration};

use crate::config::Config;
use crate::keys;

pub struct Service {
    monitor: Mutex<Monitor>,
    key: SecretKey,
    data_dir: PathBuf,
    pub bridge: Bridge<HttpTransport>,
}

pub type Shared = Arc<Service>;

/// Rebuild a monitor from the chain at `chain`, or start a new chain there.
pub fn open_monitor(key: SecretKey, docs: Arc<DocStore>, chain: &Path, batch: usize) -> Result<Monitor> {
    if !chain.exists() {
        return Ok(Monitor::new(key, Ledger::create(chain, batch)?, docs));
    }
    let (blocks, open) = Ledger::read_chain(chain)?;
    if !verify_blocks(&blocks) {
        bail!("{} fails verification", chain.display());
    }
    let txs: Vec<Tx> = blocks.iter().flat_map(|b| b.txs.iter().cloned()).chain(open).collect();
    let mut m = Monitor::replay(key, docs, &txs, batch).context("replaying chain")?;
    let same = m
        .ledger()
        .blocks()
        .iter()
        .zip(&blocks)
        .all(|(a, b)| a.block_hash == b.block_hash);
    if !same || m.ledger().blocks().len() < blocks.len() {
        bail!("{} was sealed with a different block batch size", chain.display());
    }
    m.ledger_mut().persist_to(chain)?;
    Ok(m)
}

impl Service {
    pub fn open(cfg: &Config, callback_base: &str) -> Result<Service> {
        std::fs::create_dir_all(&cfg.data_dir).with_context(|| format!("creating {}", cfg.data_dir.display()))?;
        let key = keys::load_or_create(&cfg.data_dir.join("monitor.key"))?;
        let docs = Arc::new(DocStore::open_dir(&cfg.data_dir.join("docs"))?);
        let monitor = open_monitor(key.clone(), docs, &cfg.chain_path(), cfg.block_batch_size)?;
        let bridge = Bridge::new(HttpTransport::default(), callback_base);
        let hooks = cfg.data_dir.join("webhooks.json");
        if hooks.exists() {
            let saved: Vec<Registered> = serde_json::from_slice(&std::fs::read(&hooks)?)?;
            bridge.restore(saved)?;
        }
        Ok(Service {
            monitor: Mutex::new(monitor),
            key,
            data_dir: cfg.data_dir.clone(),
            bridge,
        })
    }

    pub fn monitor(&self) -> MutexGuard<'_, Monitor> {
        // A panic mid-operation leaves the ledger as the source of truth;
        // keep serving rather than poisoning every later request.
        self.monitor.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// The monitor's own key, used when a request carries no client signature.
    pub fn key(&self) -> &SecretKey {
        &self.key
    }

    pub fn register_webhook(&self, reg: WebhookRegistration) -> Result<String, bpmnchain_bridge::BridgeError> {
        let id = self.bridge.register(reg)?;
        let path = self.data_dir.join("webhooks.json");
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec_pretty(&self.bridge.registrations()).expect("registrations serialize");
        if let Err(e) = std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, &path)) {
            tracing::error!("saving webhooks: {e}");
        }
        Ok(id)
    }

    /// Every live task of every running instance.
    pub fn all_pending(&self) -> Vec<TaskRequest> {
        let m = self.monitor();
        let ids: Vec<String> = m.instances().map(|i| i.instance_id.clone()).collect();
        ids.iter()
            .flat_map(|i| m.pending_tasks(i).unwrap_or_default())
            .collect()
    }
}

/// Hand new task requests to matching webhooks in the background. Inline
/// replies are applied as callbacks, and whatever they request is
/// dispatched in turn.
pub fn dispatch(svc: &Shared, tasks: Vec<TaskRequest>) {
    for req in tasks {
        if svc.bridge.route(&req.task_name).is_none() {
            continue;
        }
        let svc = svc.clone();
        tokio::spawn(async move {
            let Some(d) = svc.bridge.deliver(&req).await else {
                return;
            };
            tracing::info!(task = %req.task_id, status = ?d.last_status, attempts = d.attempts, "delivery");
            let Some(reply) = d.reply else { return };
            let result = complete_inline(&mut svc.monitor(), &req, reply);
            match result {
                Ok(fx) => dispatch(&svc, fx.new_tasks),
                Err(e) => tracing::warn!(task = %req.task_id, "inline reply rejected: {e}"),
            }
        });
    }
}
