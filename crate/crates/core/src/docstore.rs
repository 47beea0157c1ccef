//! Content-addressed document store and document attestations.
//!
//! A CID is `cid:` plus the SHA-256 of the bytes. This mirrors the IPFS
//! discipline (equal content, equal id) without being IPFS-compatible.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::canonical;
use crate::crypto::{self, SecretKey};

pub const MAX_DOCUMENT_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum DocError {
    #[error("document of {0} bytes exceeds the 16 MiB limit")]
    TooLarge(usize),
    #[error("unknown cid {0}")]
    UnknownCid(String),
    #[error("document store io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DocumentRecord {
    pub cid: String,
    pub size_bytes: usize,
    pub stored_at_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Attestation {
    pub instance_id: String,
    pub data_object_name: String,
    pub version: u64,
    pub cid: String,
    pub author: String,
    pub signature: String,
}

/// Bytes an author signs to attest a document version.
pub fn attestation_message(instance_id: &str, data_object_name: &str, version: u64, cid: &str) -> Vec<u8> {
    canonical::to_vec(&json!({
        "cid": cid,
        "dataObjectName": data_object_name,
        "instanceId": instance_id,
        "version": version,
    }))
}

impl Attestation {
    pub fn new(key: &SecretKey, instance_id: &str, data_object_name: &str, version: u64, cid: &str) -> Attestation {
        Attestation {
            instance_id: instance_id.to_string(),
            data_object_name: data_object_name.to_string(),
            version,
            cid: cid.to_string(),
            author: crypto::public_hex(key),
            signature: crypto::sign_hex(key, &attestation_message(instance_id, data_object_name, version, cid)),
        }
    }

    pub fn message(&self) -> Vec<u8> {
        attestation_message(&self.instance_id, &self.data_object_name, self.version, &self.cid)
    }

    pub fn signature_verifies(&self, author_key: &str) -> bool {
        crypto::verify_hex(author_key, &self.message(), &self.signature)
    }
}

/// True iff the bytes hash to `cid`, the attestation names that cid, and its
/// signature verifies under `author_key`.
pub fn verify_document(cid: &str, bytes: &[u8], attestation: &Attestation, author_key: &str) -> bool {
    crypto::cid_of(bytes) == cid && attestation.cid == cid && attestation.signature_verifies(author_key)
}

enum Backend {
    Memory(RwLock<HashMap<String, Vec<u8>>>),
    Dir(PathBuf),
}

/// Thread-safe store; puts are idempotent.
pub struct DocStore {
    backend: Backend,
    records: RwLock<HashMap<String, DocumentRecord>>,
    seq: AtomicU64,
}

impl std::fmt::Debug for DocStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DocStore").field("documents", &self.len()).finish()
    }
}

impl DocStore {
    pub fn in_memory() -> DocStore {
        DocStore {
            backend: Backend::Memory(RwLock::new(HashMap::new())),
            records: RwLock::new(HashMap::new()),
            seq: AtomicU64::new(0),
        }
    }

    /// Store backed by one file per cid under `dir`; existing files are
    /// indexed on open.
    pub fn open_dir(dir: &Path) -> Result<DocStore, DocError> {
        fs::create_dir_all(dir)?;
        let store = DocStore {
            backend: Backend::Dir(dir.to_path_buf()),
            records: RwLock::new(HashMap::new()),
            seq: AtomicU64::new(0),
        };
        let mut names: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.len() == 64 && !n.contains('.'))
            .collect();
        names.sort();
        for name in names {
            let size = fs::metadata(dir.join(&name))?.len() as usize;
            store.index(format!("cid:{name}"), size);
        }
        Ok(store)
    }

    fn index(&self, cid: String, size: usize) -> bool {
        let mut records = self.records.write().expect("docstore lock");
        if records.contains_key(&cid) {
            return false;
        }
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        records.insert(
            cid.clone(),
            DocumentRecord {
                cid,
                size_bytes: size,
                stored_at_seq: seq,
            },
        );
        true
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String, DocError> {
        if bytes.len() > MAX_DOCUMENT_BYTES {
            return Err(DocError::TooLarge(bytes.len()));
        }
        let cid = crypto::cid_of(bytes);
        if self.contains(&cid) {
            return Ok(cid);
        }
        match &self.backend {
            Backend::Memory(m) => {
                m.write().expect("docstore lock").insert(cid.clone(), bytes.to_vec());
            }
            Backend::Dir(dir) => {
                let final_path = dir.join(&cid[4..]);
                let tmp = dir.join(format!("{}.tmp", &cid[4..]));
                let mut f = fs::File::create(&tmp)?;
                f.write_all(bytes)?;
                f.sync_all()?;
                fs::rename(tmp, final_path)?;
            }
        }
        self.index(cid.clone(), bytes.len());
        Ok(cid)
    }

    pub fn get(&self, cid: &str) -> Option<Vec<u8>> {
        if !crypto::is_cid(cid) {
            return None;
        }
        match &self.backend {
            Backend::Memory(m) => m.read().expect("docstore lock").get(cid).cloned(),
            Backend::Dir(dir) => fs::read(dir.join(&cid[4..])).ok(),
        }
    }

    pub fn contains(&self, cid: &str) -> bool {
        self.records.read().expect("docstore lock").contains_key(cid)
    }

    pub fn record(&self, cid: &str) -> Option<DocumentRecord> {
        self.records.read().expect("docstore lock").get(cid).cloned()
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("docstore lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
