#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bpmnchain::crypto::{cid_of, key_from_seed, public_hex, sign_hex, SecretKey};
use bpmnchain::docstore::attestation_message;
use bpmnchain_service::api::router;
use bpmnchain_service::config::Config;
use bpmnchain_service::service::{Service, Shared};
use reqwest::multipart::{Form, Part};
use serde_json::{json, Value};

pub fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(fixture_path(name)).unwrap()
}

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn lane_key(lane: &str) -> SecretKey {
    key_from_seed(&format!("http:{lane}"))
}

pub struct Server {
    pub base: String,
    pub svc: Shared,
    task: tokio::task::JoinHandle<()>,
}

impl Server {
    pub async fn start(data_dir: &Path, batch: usize) -> Server {
        let cfg = Config {
            port: 0,
            data_dir: data_dir.to_path_buf(),
            block_batch_size: batch,
            ..Config::default()
        };
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let svc = Arc::new(Service::open(&cfg, &base).unwrap());
        let app = router(svc.clone());
        let task = tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        Server { base, svc, task }
    }

    pub fn stop(self) {
        self.task.abort();
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

pub struct Client {
    pub http: reqwest::Client,
    pub base: String,
}

impl Client {
    pub fn new(base: &str) -> Client {
        Client {
            http: reqwest::Client::new(),
            base: base.to_string(),
        }
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn post_json(&self, path: &str, body: &Value) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn post_bytes(&self, path: &str, body: Vec<u8>) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .body(body)
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    /// Deploy a fixture and create an instance with `lane_key` bindings.
    pub async fn start_instance(&self, model: &str) -> (String, String) {
        let (status, body) = self.post_bytes("/models", fixture(model)).await;
        assert_eq!(status, 201, "{body}");
        let pid = body["programId"].as_str().unwrap().to_string();
        let bindings: BTreeMap<String, String> = body["actors"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| {
                let l = l.as_str().unwrap();
                (l.to_string(), public_hex(&lane_key(l)))
            })
            .collect();
        let (status, body) = self
            .post_json("/instances", &json!({ "programId": pid, "actorBindings": bindings }))
            .await;
        assert_eq!(status, 201, "{body}");
        (pid, body["instanceId"].as_str().unwrap().to_string())
    }

    pub async fn pending(&self, iid: &str) -> Vec<Value> {
        let (status, body) = self.get(&format!("/instances/{iid}/tasks")).await;
        assert_eq!(status, 200);
        body.as_array().unwrap().clone()
    }

    pub async fn task(&self, iid: &str, tid: &str) -> Value {
        self.pending(iid)
            .await
            .into_iter()
            .find(|t| t["taskId"] == tid)
            .unwrap_or_else(|| panic!("{tid} not pending"))
    }

    /// Multipart completion; every output's document is `"{tid}/{name}"`.
    pub fn completion_form(&self, iid: &str, task: &Value, key: &SecretKey) -> Form {
        let tid = task["taskId"].as_str().unwrap();
        let mut form = Form::new()
            .text("token", task["callbackToken"].as_str().unwrap().to_string())
            .text("actor", public_hex(key));
        for o in task["outputs"].as_array().unwrap() {
            let name = o["name"].as_str().unwrap();
            let version = o["version"].as_u64().unwrap();
            let bytes = format!("{tid}/{name}").into_bytes();
            let cid = cid_of(&bytes);
            let sig = sign_hex(key, &attestation_message(iid, name, version, &cid));
            form = form
                .part(
                    format!("doc.{name}"),
                    Part::bytes(bytes).file_name(format!("{name}.txt")),
                )
                .text(format!("meta.{name}"), json!({ "by": tid }).to_string())
                .text(format!("sig.{name}"), sig);
        }
        form
    }

    pub async fn complete_form(&self, iid: &str, tid: &str, form: Form) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}/instances/{iid}/tasks/{tid}/complete", self.base))
            .multipart(form)
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn complete(&self, iid: &str, tid: &str) -> Value {
        let task = self.task(iid, tid).await;
        let lane = task["lane"].as_str().unwrap().to_string();
        let form = self.completion_form(iid, &task, &lane_key(&lane));
        let (status, body) = self.complete_form(iid, tid, form).await;
        assert_eq!(status, 200, "{tid}: {body}");
        body
    }
}

pub fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_bpmnchain"))
}

/// `bpmnchain serve` as a child process on a free port.
pub struct Spawned {
    pub child: std::process::Child,
    pub base: String,
}

impl Spawned {
    pub fn start(data_dir: &Path, batch: usize) -> Spawned {
        use std::io::BufRead;
        let mut child = bin()
            .arg("serve")
            .env("BPMNCHAIN_PORT", "0")
            .env("BPMNCHAIN_DATA_DIR", data_dir)
            .env("BPMNCHAIN_BLOCK_BATCH_SIZE", batch.to_string())
            .env("RUST_LOG", "warn")
            .stdout(std::process::Stdio::piped())
            .spawn()
            .expect("spawn serve");
        let stdout = child.stdout.take().unwrap();
        let mut line = String::new();
        std::io::BufReader::new(stdout).read_line(&mut line).unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected first line {line:?}"))
            .to_string();
        Spawned {
            child,
            base: format!("http://{addr}"),
        }
    }

    /// SIGKILL, no chance to flush or seal.
    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Spawned {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
