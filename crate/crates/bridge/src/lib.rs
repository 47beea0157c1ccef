//! Off-chain bridge: hands task requests to HTTP responders and feeds their
//! results back into the monitor.
//!
//! A responder is registered against a task-name glob. Each matching request
//! is POSTed as canonical JSON with an HMAC-SHA-256 of the body in
//! `X-Bridge-Signature`. Non-2xx replies are retried with exponential backoff;
//! once retries are exhausted the task simply stays pending for a human.
//! A responder may answer inline with `{"outputs": [...]}` or call back later
//! with the callback token.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use bpmnchain::canonical;
use bpmnchain::engine::{Effects, EngineError, Monitor, OutputSubmission, TaskRequest};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::Sha256;
use thiserror::Error;

pub const SIGNATURE_HEADER: &str = "X-Bridge-Signature";
pub const ATTEMPT_HEADER: &str = "X-Bridge-Attempt";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BridgeError {
    #[error("a webhook is already registered for pattern {0}")]
    DuplicatePattern(String),
    #[error("bad webhook url {0}")]
    BadUrl(String),
    #[error("bad task-name pattern {0}")]
    BadPattern(String),
}

fn default_max_retries() -> u32 {
    5
}

fn default_backoff_base_ms() -> u64 {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WebhookRegistration {
    /// Glob over task names, e.g. `GetIns` or `Get*`.
    pub pattern: String,
    pub url: String,
    pub shared_secret: String,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
}

impl WebhookRegistration {
    pub fn new(pattern: &str, url: &str, shared_secret: &str) -> Self {
        WebhookRegistration {
            pattern: pattern.to_string(),
            url: url.to_string(),
            shared_secret: shared_secret.to_string(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
        }
    }

    /// Wait before retry number `attempt + 1`, counting attempts from zero.
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << attempt.min(32)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Registered {
    pub id: String,
    #[serde(flatten)]
    pub registration: WebhookRegistration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DeliveryStatus {
    Pending,
    Delivered,
    /// The last attempt failed and another one is scheduled.
    Failed,
    Exhausted,
}

/// A synchronous answer from a responder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlineReply {
    pub outputs: Vec<OutputSubmission>,
    /// Public key that signed the outputs; defaults to the lane's actor.
    #[serde(default)]
    pub actor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Delivery {
    pub instance_id: String,
    pub task_id: String,
    pub registration_id: String,
    pub attempts: u32,
    pub last_status: DeliveryStatus,
    pub last_http_status: Option<u16>,
    #[serde(skip)]
    pub reply: Option<InlineReply>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpReply {
    pub status: u16,
    pub body: Vec<u8>,
}

/// How request bodies reach responders. Errors are connection failures.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn post(&self, url: &str, headers: &[(&str, String)], body: Vec<u8>) -> Result<HttpReply, String>;
}

pub struct HttpTransport {
    client: reqwest::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client");
        HttpTransport { client }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport::new(Duration::from_secs(10))
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn post(&self, url: &str, headers: &[(&str, String)], body: Vec<u8>) -> Result<HttpReply, String> {
        let mut req = self
            .client
            .post(url)
            .header("Content-Type", "application/json")
            .body(body);
        for (k, v) in headers {
            req = req.header(*k, v);
        }
        let resp = req.send().await.map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.bytes().await.map_err(|e| e.to_string())?.to_vec();
        Ok(HttpReply { status, body })
    }
}

/// Hex HMAC-SHA-256 of `body`.
pub fn sign_body(secret: &str, body: &[u8]) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret.as_bytes()).expect("hmac takes any key length");
    mac.update(body);
    hex::encode(mac.finalize().into_bytes())
}

/// Responder-side check of `X-Bridge-Signature`, in constant time.
pub fn verify_body(secret: &str, body: &[u8], signature: &str) -> bool {
    let Ok(sig) = hex::decode(signature) else {
        return false;
    };
    let mut mac = Hmac::<Sha256>::new_from_slice(secret.as_bytes()).expect("hmac takes any key length");
    mac.update(body);
    mac.verify_slice(&sig).is_ok()
}

/// `{"outputs": [...]}` from a 2xx reply body; anything else means the
/// responder will call back later.
pub fn parse_inline(body: &[u8]) -> Option<InlineReply> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return None;
    }
    serde_json::from_slice(body).ok()
}

pub fn callback_url(base: &str, req: &TaskRequest) -> String {
    format!(
        "{}/instances/{}/tasks/{}/complete",
        base.trim_end_matches('/'),
        req.instance_id,
        req.task_id
    )
}

pub fn request_body(req: &TaskRequest, callback_url: &str) -> Vec<u8> {
    let inputs: Vec<_> = req
        .inputs
        .iter()
        .map(|i| json!({ "name": i.name, "cid": i.cid }))
        .collect();
    canonical::to_vec(&json!({
        "instanceId": req.instance_id,
        "taskId": req.task_id,
        "taskName": req.task_name,
        "purpose": req.purpose,
        "inputs": inputs,
        "callbackToken": req.callback_token,
        "callbackUrl": callback_url,
    }))
}

fn check_url(text: &str) -> Result<(), BridgeError> {
    match url::Url::parse(text) {
        Ok(u) if (u.scheme() == "http" || u.scheme() == "https") && u.host().is_some() => Ok(()),
        _ => Err(BridgeError::BadUrl(text.to_string())),
    }
}

pub struct Bridge<T = HttpTransport> {
    transport: T,
    callback_base: String,
    registrations: Mutex<Vec<(Registered, glob::Pattern)>>,
    deliveries: Mutex<BTreeMap<(String, String), Delivery>>,
}

impl<T: Transport> Bridge<T> {
    /// `callback_base` is the service root responders call back to.
    pub fn new(transport: T, callback_base: &str) -> Self {
        Bridge {
            transport,
            callback_base: callback_base.to_string(),
            registrations: Mutex::new(Vec::new()),
            deliveries: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn register(&self, reg: WebhookRegistration) -> Result<String, BridgeError> {
        self.insert(None, reg)
    }

    /// Re-register saved webhooks, keeping their ids.
    pub fn restore(&self, saved: Vec<Registered>) -> Result<(), BridgeError> {
        for r in saved {
            self.insert(Some(r.id), r.registration)?;
        }
        Ok(())
    }

    fn insert(&self, id: Option<String>, reg: WebhookRegistration) -> Result<String, BridgeError> {
        check_url(&reg.url)?;
        let pattern = glob::Pattern::new(&reg.pattern).map_err(|_| BridgeError::BadPattern(reg.pattern.clone()))?;
        let mut regs = self.registrations.lock().expect("registrations lock");
        if regs.iter().any(|(r, _)| r.registration.pattern == reg.pattern) {
            return Err(BridgeError::DuplicatePattern(reg.pattern));
        }
        let id = id.unwrap_or_else(|| format!("wh{}", regs.len() + 1));
        regs.push((
            Registered {
                id: id.clone(),
                registration: reg,
            },
            pattern,
        ));
        Ok(id)
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn registrations(&self) -> Vec<Registered> {
        let regs = self.registrations.lock().expect("registrations lock");
        regs.iter().map(|(r, _)| r.clone()).collect()
    }

    /// First registration, in registration order, whose glob matches.
    pub fn route(&self, task_name: &str) -> Option<Registered> {
        let regs = self.registrations.lock().expect("registrations lock");
        regs.iter().find(|(_, p)| p.matches(task_name)).map(|(r, _)| r.clone())
    }

    pub fn delivery(&self, instance_id: &str, task_id: &str) -> Option<Delivery> {
        let d = self.deliveries.lock().expect("deliveries lock");
        d.get(&(instance_id.to_string(), task_id.to_string())).cloned()
    }

    pub fn deliveries(&self) -> Vec<Delivery> {
        self.deliveries
            .lock()
            .expect("deliveries lock")
            .values()
            .cloned()
            .collect()
    }

    fn save(&self, d: &Delivery) {
        let mut all = self.deliveries.lock().expect("deliveries lock");
        all.insert((d.instance_id.clone(), d.task_id.clone()), d.clone());
    }

    /// Deliver one request; `None` when no webhook matches its task name.
    /// Never touches the monitor.
    pub async fn deliver(&self, req: &TaskRequest) -> Option<Delivery> {
        let reg = self.route(&req.task_name)?;
        let body = request_body(req, &callback_url(&self.callback_base, req));
        let signature = sign_body(&reg.registration.shared_secret, &body);
        let mut d = Delivery {
            instance_id: req.instance_id.clone(),
            task_id: req.task_id.clone(),
            registration_id: reg.id.clone(),
            attempts: 0,
            last_status: DeliveryStatus::Pending,
            last_http_status: None,
            reply: None,
        };
        self.save(&d);
        loop {
            let attempt = d.attempts;
            d.attempts += 1;
            let headers = [
                (SIGNATURE_HEADER, signature.clone()),
                (ATTEMPT_HEADER, d.attempts.to_string()),
            ];
            let result = self.transport.post(&reg.registration.url, &headers, body.clone()).await;
            d.last_http_status = result.as_ref().ok().map(|r| r.status);
            match result {
                Ok(r) if (200..300).contains(&r.status) => {
                    d.last_status = DeliveryStatus::Delivered;
                    d.reply = parse_inline(&r.body);
                    self.save(&d);
                    return Some(d);
                }
                _ if attempt >= reg.registration.max_retries => {
                    d.last_status = DeliveryStatus::Exhausted;
                    self.save(&d);
                    return Some(d);
                }
                _ => {
                    d.last_status = DeliveryStatus::Failed;
                    self.save(&d);
                    tokio::time::sleep(reg.registration.backoff(attempt)).await;
                }
            }
        }
    }
}

/// Route a responder's result into the monitor. A token works once.
pub fn handle_callback(
    monitor: &mut Monitor,
    callback_token: &str,
    outputs: Vec<OutputSubmission>,
    signer: &str,
) -> Result<Effects, EngineError> {
    let (iid, tid) = monitor
        .task_by_token(callback_token)
        .map(|(i, t)| (i.to_string(), t.to_string()))
        .ok_or(EngineError::BadToken)?;
    let live = monitor
        .instance(&iid)
        .and_then(|i| i.tasks.get(&tid))
        .is_some_and(|t| t.state.is_live() && t.callback_token == callback_token);
    if !live {
        return Err(EngineError::BadToken);
    }
    monitor.complete_task(&iid, &tid, callback_token, outputs, signer)
}

/// Apply an inline reply for `req`, signed by the reply's actor or else the
/// actor bound to the task's lane.
pub fn complete_inline(monitor: &mut Monitor, req: &TaskRequest, reply: InlineReply) -> Result<Effects, EngineError> {
    let signer = match reply.actor {
        Some(a) => a,
        None => monitor
            .instance(&req.instance_id)
            .and_then(|i| i.actor_bindings.get(&req.lane).cloned())
            .ok_or_else(|| EngineError::UnknownInstance(req.instance_id.clone()))?,
    };
    handle_callback(monitor, &req.callback_token, reply.outputs, &signer)
}
