//! Simulated append-only ledger: signed transactions in hash-chained blocks.
//!
//! Persistent form is one canonical JSON block per line (`chain.ndjson`),
//! starting with the genesis block.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical;
use crate::crypto::{self, SecretKey};

pub const GENESIS_PREV_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("bad transaction signature")]
    BadSignature,
    #[error("bad nonce: expected {expected}, got {got}")]
    BadNonce { expected: u64, got: u64 },
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("chain file {path}: {message}")]
    Storage { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Tx {
    pub tx_id: String,
    pub caller: String,
    pub method: String,
    pub nonce: u64,
    pub payload: Value,
    pub signature: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Block {
    pub height: u64,
    pub prev_hash: String,
    pub txs: Vec<Tx>,
    pub block_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LedgerEvent {
    pub name: String,
    pub tx_id: String,
    pub block_height: u64,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Receipt {
    pub tx_id: String,
    pub block_height: u64,
    pub events: Vec<(String, Value)>,
}

/// Event name raised by a record kind.
pub fn event_name(method: &str) -> &str {
    match method {
        "DeployProgram" => "ProgramDeployed",
        m => m,
    }
}

fn body_bytes(caller: &str, method: &str, nonce: u64, payload: &Value) -> Vec<u8> {
    canonical::to_vec(&json!({
        "caller": caller,
        "method": method,
        "nonce": nonce,
        "payload": payload,
    }))
}

impl Tx {
    pub fn sign(key: &SecretKey, method: &str, nonce: u64, payload: Value) -> Tx {
        let caller = crypto::public_hex(key);
        let body = body_bytes(&caller, method, nonce, &payload);
        Tx {
            tx_id: crypto::cid_of(&body),
            signature: crypto::sign_hex(key, &body),
            caller,
            method: method.to_string(),
            nonce,
            payload,
        }
    }

    /// Id matches the body and the signature verifies against the caller.
    pub fn verify(&self) -> bool {
        let body = body_bytes(&self.caller, &self.method, self.nonce, &self.payload);
        self.tx_id == crypto::cid_of(&body) && crypto::verify_hex(&self.caller, &body, &self.signature)
    }

    pub fn instance_id(&self) -> Option<&str> {
        self.payload.get("instanceId").and_then(Value::as_str)
    }
}

pub fn block_hash(height: u64, prev_hash: &str, txs: &[Tx]) -> String {
    let ids: Vec<&str> = txs.iter().map(|t| t.tx_id.as_str()).collect();
    crypto::sha256_hex(&canonical::to_vec(&json!({
        "height": height,
        "prevHash": prev_hash,
        "txIds": ids,
    })))
}

fn genesis() -> Block {
    Block {
        height: 0,
        prev_hash: GENESIS_PREV_HASH.to_string(),
        txs: Vec::new(),
        block_hash: block_hash(0, GENESIS_PREV_HASH, &[]),
    }
}

/// Check hashes, links, signatures and per-caller nonces of a block list.
pub fn verify_blocks(blocks: &[Block]) -> bool {
    let Some(first) = blocks.first() else {
        return false;
    };
    if first.height != 0 || first.prev_hash != GENESIS_PREV_HASH {
        return false;
    }
    let mut nonces: BTreeMap<&str, u64> = BTreeMap::new();
    let mut prev: Option<&Block> = None;
    for b in blocks {
        if let Some(p) = prev {
            if b.height != p.height + 1 || b.prev_hash != p.block_hash {
                return false;
            }
        }
        if b.block_hash != block_hash(b.height, &b.prev_hash, &b.txs) {
            return false;
        }
        for tx in &b.txs {
            let last = nonces.entry(tx.caller.as_str()).or_insert(0);
            if !tx.verify() || tx.nonce != *last + 1 {
                return false;
            }
            *last = tx.nonce;
        }
        prev = Some(b);
    }
    true
}

pub struct Ledger {
    blocks: Vec<Block>,
    open: Vec<Tx>,
    batch_size: usize,
    nonces: BTreeMap<String, u64>,
    files: Option<Files>,
}

/// Sealed blocks go to the chain file; transactions of the open block are
/// journaled beside it so a crash loses nothing that was accepted.
struct Files {
    path: PathBuf,
    chain: File,
    journal: File,
}

/// Path of the open-block journal kept next to a chain file.
pub fn journal_path(chain: &Path) -> PathBuf {
    let mut name = chain.as_os_str().to_os_string();
    name.push(".open");
    PathBuf::from(name)
}

impl std::fmt::Debug for Ledger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ledger")
            .field("height", &self.height())
            .field("open", &self.open.len())
            .finish()
    }
}

impl Ledger {
    pub fn in_memory(batch_size: usize) -> Ledger {
        Ledger {
            blocks: vec![genesis()],
            open: Vec::new(),
            batch_size: batch_size.max(1),
            nonces: BTreeMap::new(),
            files: None,
        }
    }

    /// Empty chain persisted at `path`; the file is truncated.
    pub fn create(path: &Path, batch_size: usize) -> Result<Ledger, LedgerError> {
        let mut ledger = Ledger::in_memory(batch_size);
        ledger.persist_to(path)?;
        Ok(ledger)
    }

    /// Sealed blocks and journaled open transactions of a chain file.
    pub fn read_chain(path: &Path) -> Result<(Vec<Block>, Vec<Tx>), LedgerError> {
        let blocks = Ledger::read_blocks(path)?;
        let journal = journal_path(path);
        let mut open = Vec::new();
        if journal.exists() {
            let file = File::open(&journal).map_err(|e| storage(&journal, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| storage(&journal, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                // A torn final line is what a crash mid-write leaves behind.
                match serde_json::from_str(&line) {
                    Ok(tx) => open.push(tx),
                    Err(_) => break,
                }
            }
        }
        // A crash between sealing a block and truncating the journal leaves
        // the block's transactions in both places.
        let sealed: std::collections::BTreeSet<&str> = blocks
            .iter()
            .flat_map(|b| b.txs.iter().map(|t| t.tx_id.as_str()))
            .collect();
        open.retain(|t: &Tx| !sealed.contains(t.tx_id.as_str()));
        Ok((blocks, open))
    }

    /// Read blocks from a chain file without opening it for writing.
    pub fn read_blocks(path: &Path) -> Result<Vec<Block>, LedgerError> {
        let file = File::open(path).map_err(|e| storage(path, e))?;
        let mut blocks = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| storage(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            blocks.push(serde_json::from_str(&line).map_err(|e| storage(path, e))?);
        }
        Ok(blocks)
    }

    pub fn height(&self) -> u64 {
        self.blocks.last().map_or(0, |b| b.height)
    }

    pub fn head_hash(&self) -> &str {
        &self.blocks.last().expect("genesis").block_hash
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_from(&self, height: u64) -> &[Block] {
        let start = (height as usize).min(self.blocks.len());
        &self.blocks[start..]
    }

    /// Every accepted transaction, sealed or not, in order.
    pub fn txs(&self) -> impl Iterator<Item = &Tx> {
        self.blocks.iter().flat_map(|b| b.txs.iter()).chain(self.open.iter())
    }

    pub fn tx_count(&self) -> usize {
        self.txs().count()
    }

    pub fn next_nonce(&self, caller: &str) -> u64 {
        self.nonces.get(caller).copied().unwrap_or(0) + 1
    }

    pub fn submit(&mut self, tx: Tx) -> Result<Receipt, LedgerError> {
        if !tx.verify() {
            return Err(LedgerError::BadSignature);
        }
        let expected = self.next_nonce(&tx.caller);
        if tx.nonce != expected {
            return Err(LedgerError::BadNonce {
                expected,
                got: tx.nonce,
            });
        }
        self.nonces.insert(tx.caller.clone(), tx.nonce);
        let receipt = Receipt {
            tx_id: tx.tx_id.clone(),
            block_height: self.height() + 1,
            events: vec![(event_name(&tx.method).to_string(), tx.payload.clone())],
        };
        self.open.push(tx);
        if self.open.len() >= self.batch_size {
            self.seal()?;
        } else if let Some(f) = &mut self.files {
            let tx = self.open.last().expect("just pushed");
            writeln!(f.journal, "{}", canonical::to_string(tx)).map_err(|e| storage(&f.path, e))?;
            f.journal.flush().map_err(|e| storage(&f.path, e))?;
        }
        Ok(receipt)
    }

    /// Close the open block, if it holds any transactions.
    pub fn seal(&mut self) -> Result<(), LedgerError> {
        if self.open.is_empty() {
            return Ok(());
        }
        let txs = std::mem::take(&mut self.open);
        let prev = self.head_hash().to_string();
        let height = self.height() + 1;
        let block = Block {
            height,
            block_hash: block_hash(height, &prev, &txs),
            prev_hash: prev,
            txs,
        };
        if let Some(f) = &mut self.files {
            writeln!(f.chain, "{}", canonical::to_string(&block)).map_err(|e| storage(&f.path, e))?;
            f.chain.flush().map_err(|e| storage(&f.path, e))?;
            f.journal.set_len(0).map_err(|e| storage(&f.path, e))?;
        }
        self.blocks.push(block);
        Ok(())
    }

    pub fn verify_chain(&self) -> bool {
        verify_blocks(&self.blocks)
    }

    /// Events of every transaction whose payload names the instance.
    pub fn get_events(&self, instance_id: &str) -> Vec<LedgerEvent> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for tx in &b.txs {
                if tx.instance_id() == Some(instance_id) {
                    out.push(LedgerEvent {
                        name: event_name(&tx.method).to_string(),
                        tx_id: tx.tx_id.clone(),
                        block_height: b.height,
                        payload: tx.payload.clone(),
                    });
                }
            }
        }
        for tx in &self.open {
            if tx.instance_id() == Some(instance_id) {
                out.push(LedgerEvent {
                    name: event_name(&tx.method).to_string(),
                    tx_id: tx.tx_id.clone(),
                    block_height: self.height() + 1,
                    payload: tx.payload.clone(),
                });
            }
        }
        out
    }

    pub fn find_tx(&self, tx_id: &str) -> Option<&Tx> {
        self.txs().find(|t| t.tx_id == tx_id)
    }

    /// Feed a transaction log into a fresh ledger with the same batching.
    pub fn replay<'a>(txs: impl IntoIterator<Item = &'a Tx>, batch_size: usize) -> Result<Ledger, LedgerError> {
        let mut ledger = Ledger::in_memory(batch_size);
        for tx in txs {
            ledger.submit(tx.clone())?;
        }
        Ok(ledger)
    }

    /// Attach a chain file to an in-memory ledger by rewriting it from the
    /// current blocks, then appending future blocks to it.
    pub fn persist_to(&mut self, path: &Path) -> Result<(), LedgerError> {
        let rewrite = |p: &Path, lines: Vec<String>| -> Result<File, LedgerError> {
            let mut file = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(p)
                .map_err(|e| storage(p, e))?;
            for l in lines {
                writeln!(file, "{l}").map_err(|e| storage(p, e))?;
            }
            file.flush().map_err(|e| storage(p, e))?;
            Ok(file)
        };
        let chain = rewrite(path, self.blocks.iter().map(canonical::to_string).collect())?;
        let journal_file = journal_path(path);
        drop(rewrite(
            &journal_file,
            self.open.iter().map(canonical::to_string).collect(),
        )?);
        // Append mode keeps later writes at the end after `set_len(0)`.
        let journal = OpenOptions::new()
            .append(true)
            .open(&journal_file)
            .map_err(|e| storage(&journal_file, e))?;
        self.files = Some(Files {
            path: path.to_path_buf(),
            chain,
            journal,
        });
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&canonical::to_string(b));
            out.push('\n');
        }
        out
    }
}

fn storage(path: &Path, e: impl std::fmt::Display) -> LedgerError {
    LedgerError::Storage {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::key_from_seed;

    fn tx(key: &SecretKey, nonce: u64) -> Tx {
        Tx::sign(key, "Attestation", nonce, json!({"instanceId": "i", "n": nonce}))
    }

    #[test]
    fn first_tx_lands_at_height_one() {
        let k = key_from_seed("k");
        let mut l = Ledger::in_memory(1);
        let r = l.submit(tx(&k, 1)).unwrap();
        assert_eq!(r.block_height, 1);
        assert_eq!(l.height(), 1);
        assert!(l.verify_chain());
    }

    #[test]
    fn replayed_tx_has_bad_nonce() {
        let k = key_from_seed("k");
        let mut l = Ledger::in_memory(1);
        let t = tx(&k, 1);
        l.submit(t.clone()).unwrap();
        assert!(matches!(
            l.submit(t),
            Err(LedgerError::BadNonce { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn flipped_payload_is_bad_signature() {
        let k = key_from_seed("k");
        let mut l = Ledger::in_memory(1);
        let mut t = tx(&k, 1);
        t.payload["n"] = json!(2);
        assert!(matches!(l.submit(t), Err(LedgerError::BadSignature)));
    }

    #[test]
    fn genesis_only_chain_verifies() {
        let l = Ledger::in_memory(1);
        assert!(l.verify_chain());
        assert_eq!(l.blocks()[0].prev_hash.len(), 64);
    }

    #[test]
    fn batching_groups_transactions() {
        let k = key_from_seed("k");
        let mut l = Ledger::in_memory(3);
        for n in 1..=4 {
            l.submit(tx(&k, n)).unwrap();
        }
        assert_eq!(l.height(), 1);
        assert_eq!(l.blocks()[1].txs.len(), 3);
        l.seal().unwrap();
        assert_eq!(l.height(), 2);
        assert!(l.verify_chain());
    }

    #[test]
    fn open_block_is_journaled() {
        let k = key_from_seed("k");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.ndjson");
        let mut l = Ledger::create(&path, 3).unwrap();
        for n in 1..=4 {
            l.submit(tx(&k, n)).unwrap();
        }
        let (blocks, open) = Ledger::read_chain(&path).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(open.len(), 1);
        assert_eq!(open[0].nonce, 4);
        let again = Ledger::replay(blocks.iter().flat_map(|b| &b.txs).chain(&open), 3).unwrap();
        assert_eq!(again.tx_count(), 4);
        assert_eq!(again.blocks(), l.blocks());
    }

    #[test]
    fn journal_left_over_from_a_seal_is_ignored() {
        let k = key_from_seed("k");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.ndjson");
        let mut l = Ledger::create(&path, 2).unwrap();
        l.submit(tx(&k, 1)).unwrap();
        let journal = std::fs::read(journal_path(&path)).unwrap();
        l.submit(tx(&k, 2)).unwrap();
        // As if the process died after writing the block but before truncating.
        std::fs::write(journal_path(&path), journal).unwrap();
        let (blocks, open) = Ledger::read_chain(&path).unwrap();
        assert_eq!(blocks.len(), 2);
        assert!(open.is_empty());
    }

    #[test]
    fn torn_journal_line_is_dropped() {
        let k = key_from_seed("k");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.ndjson");
        let mut l = Ledger::create(&path, 5).unwrap();
        l.submit(tx(&k, 1)).unwrap();
        l.submit(tx(&k, 2)).unwrap();
        let mut bytes = std::fs::read(journal_path(&path)).unwrap();
        bytes.truncate(bytes.len() - 20);
        std::fs::write(journal_path(&path), bytes).unwrap();
        let (_, open) = Ledger::read_chain(&path).unwrap();
        assert_eq!(open.len(), 1);
    }
}
