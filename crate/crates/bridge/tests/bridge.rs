use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use axum::body::Bytes;
use axum::http::HeaderMap;
use axum::routing::post;
use axum::{Json, Router};
use bpmnchain::compiler::compile;
use bpmnchain::crypto::{key_from_seed, public_hex, SecretKey};
use bpmnchain::docstore::DocStore;
use bpmnchain::engine::{EngineError, Monitor, OutputSubmission, TaskRequest};
use bpmnchain::ledger::Ledger;
use bpmnchain_bridge::*;
use serde_json::{json, Map, Value};

fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(
        PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../fixtures")
            .join(name),
    )
    .unwrap()
}

fn seller() -> SecretKey {
    key_from_seed("actor:Seller")
}

/// Harvester sale instance driven up to the parallel block.
fn monitor_at_fork() -> (Monitor, String) {
    let program = compile(&fixture("harvester-sale.bpmn")).unwrap().program;
    let mut m = Monitor::new(
        key_from_seed("monitor"),
        Ledger::in_memory(1),
        Arc::new(DocStore::in_memory()),
    );
    let pid = m.deploy_with_key(program, &key_from_seed("deployer")).unwrap();
    let bindings = [("Seller".to_string(), public_hex(&seller()))].into();
    let iid = m.create_with_key(&pid, bindings, &key_from_seed("creator")).unwrap();
    m.run_until_quiescent(&iid).unwrap();
    for task in ["RecAgr", "GetTrReq"] {
        let req = pending(&m, &iid, task).unwrap();
        let outs = sign_outputs(&m, &req);
        m.complete_task(&iid, task, &req.callback_token, outs, &public_hex(&seller()))
            .unwrap();
    }
    (m, iid)
}

fn pending(m: &Monitor, iid: &str, task: &str) -> Option<TaskRequest> {
    m.pending_tasks(iid).unwrap().into_iter().find(|t| t.task_id == task)
}

fn sign_outputs(m: &Monitor, req: &TaskRequest) -> Vec<OutputSubmission> {
    req.outputs
        .iter()
        .map(|o| {
            let cid = m.docs().put(format!("{}:{}", req.task_id, o.name).as_bytes()).unwrap();
            OutputSubmission::signed(&seller(), &req.instance_id, &o.name, o.version, &cid, Map::new())
        })
        .collect()
}

fn task_completed_count(m: &Monitor) -> usize {
    m.ledger().txs().filter(|t| t.method == "TaskCompleted").count()
}

/// Replies with scripted statuses, then 200 forever.
struct Scripted {
    statuses: Mutex<VecDeque<u16>>,
    seen: Mutex<Vec<(Vec<(String, String)>, Vec<u8>)>>,
}

impl Scripted {
    fn new(statuses: &[u16]) -> Self {
        Scripted {
            statuses: Mutex::new(statuses.iter().copied().collect()),
            seen: Mutex::new(Vec::new()),
        }
    }
}

#[async_trait]
impl Transport for Scripted {
    async fn post(&self, _url: &str, headers: &[(&str, String)], body: Vec<u8>) -> Result<HttpReply, String> {
        let headers = headers.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        self.seen.lock().unwrap().push((headers, body));
        let status = self.statuses.lock().unwrap().pop_front().unwrap_or(200);
        Ok(HttpReply {
            status,
            body: Vec::new(),
        })
    }
}

struct Down;

#[async_trait]
impl Transport for Down {
    async fn post(&self, _: &str, _: &[(&str, String)], _: Vec<u8>) -> Result<HttpReply, String> {
        Err("connection refused".into())
    }
}

fn fast(pattern: &str) -> WebhookRegistration {
    WebhookRegistration {
        backoff_base_ms: 1,
        ..WebhookRegistration::new(pattern, "http://insurer.example/hook", "s3cret")
    }
}

#[test]
fn registration_is_validated() {
    let b = Bridge::new(Scripted::new(&[]), "http://localhost:8080");
    assert_eq!(b.register(fast("GetIns")).unwrap(), "wh1");
    assert_eq!(
        b.register(fast("GetIns")),
        Err(BridgeError::DuplicatePattern("GetIns".into()))
    );
    let bad = WebhookRegistration::new("GetTransp", "not a url", "k");
    assert_eq!(b.register(bad), Err(BridgeError::BadUrl("not a url".into())));
    let ftp = WebhookRegistration::new("GetTransp", "ftp://x.example/", "k");
    assert!(matches!(b.register(ftp), Err(BridgeError::BadUrl(_))));
    assert!(matches!(b.register(fast("Get[")), Err(BridgeError::BadPattern(_))));
    assert_eq!(b.registrations().len(), 1);
}

#[test]
fn defaults_come_from_json() {
    let reg: WebhookRegistration =
        serde_json::from_value(json!({"pattern": "Get*", "url": "http://a.example/", "sharedSecret": "k"})).unwrap();
    assert_eq!((reg.max_retries, reg.backoff_base_ms), (5, 200));
    assert_eq!(reg.backoff(0).as_millis(), 200);
    assert_eq!(reg.backoff(3).as_millis(), 1600);
}

#[test]
fn globs_route_by_task_name() {
    let b = Bridge::new(Scripted::new(&[]), "http://svc");
    b.register(fast("GetIns")).unwrap();
    b.register(fast("Get*")).unwrap();
    assert_eq!(b.route("GetIns").unwrap().id, "wh1");
    assert_eq!(b.route("GetTransp").unwrap().id, "wh2");
    assert!(b.route("DoTransp").is_none());
}

#[test]
fn restore_keeps_ids() {
    let a = Bridge::new(Scripted::new(&[]), "http://svc");
    a.register(fast("GetIns")).unwrap();
    a.register(fast("GetTransp")).unwrap();
    let saved = serde_json::to_string(&a.registrations()).unwrap();
    let b = Bridge::new(Scripted::new(&[]), "http://svc");
    b.restore(serde_json::from_str(&saved).unwrap()).unwrap();
    assert_eq!(b.registrations(), a.registrations());
}

#[tokio::test]
async fn first_success_is_one_attempt() {
    let (m, iid) = monitor_at_fork();
    let b = Bridge::new(Scripted::new(&[200]), "http://svc/");
    b.register(fast("GetIns")).unwrap();
    let req = pending(&m, &iid, "GetIns").unwrap();
    let d = b.deliver(&req).await.unwrap();
    assert_eq!((d.last_status, d.attempts), (DeliveryStatus::Delivered, 1));
    assert!(d.reply.is_none());
    assert_eq!(b.delivery(&iid, "GetIns"), Some(d));
}

#[tokio::test]
async fn body_is_signed_and_names_the_callback() {
    let (m, iid) = monitor_at_fork();
    let b = Bridge::new(Scripted::new(&[]), "http://svc/");
    b.register(fast("GetIns")).unwrap();
    let req = pending(&m, &iid, "GetIns").unwrap();
    b.deliver(&req).await.unwrap();
    let seen = b.transport().seen.lock().unwrap().clone();
    let (headers, body) = &seen[0];
    let sig = headers.iter().find(|(k, _)| k == SIGNATURE_HEADER).unwrap().1.clone();
    assert!(verify_body("s3cret", body, &sig));
    assert!(!verify_body("other", body, &sig));
    let v: Value = serde_json::from_slice(body).unwrap();
    assert_eq!(v["taskId"], "GetIns");
    assert_eq!(v["taskName"], req.task_name);
    assert_eq!(v["callbackToken"], req.callback_token);
    assert_eq!(
        v["callbackUrl"],
        format!("http://svc/instances/{iid}/tasks/GetIns/complete")
    );
    assert_eq!(v["inputs"][0]["name"], "TrRequirements");
    assert!(v["inputs"][0]["cid"].as_str().unwrap().starts_with("cid:"));
    assert_eq!(body, &request_body(&req, v["callbackUrl"].as_str().unwrap()));
}

#[tokio::test(start_paused = true)]
async fn five_failures_then_success_is_attempt_six() {
    let (m, iid) = monitor_at_fork();
    let b = Bridge::new(Scripted::new(&[500; 5]), "http://svc");
    b.register(WebhookRegistration::new("GetIns", "http://insurer.example/", "k"))
        .unwrap();
    let req = pending(&m, &iid, "GetIns").unwrap();
    let t0 = tokio::time::Instant::now();
    let d = b.deliver(&req).await.unwrap();
    assert_eq!((d.last_status, d.attempts), (DeliveryStatus::Delivered, 6));
    // 200 ms doubled after each failure: 200 + 400 + 800 + 1600 + 3200.
    assert_eq!(t0.elapsed().as_millis(), 6200);
    let attempts: Vec<String> = b
        .transport()
        .seen
        .lock()
        .unwrap()
        .iter()
        .map(|(h, _)| h.iter().find(|(k, _)| k == ATTEMPT_HEADER).unwrap().1.clone())
        .collect();
    assert_eq!(attempts, ["1", "2", "3", "4", "5", "6"]);
}

#[tokio::test]
async fn always_failing_is_exhausted_and_task_stays_pending() {
    let (m, iid) = monitor_at_fork();
    let before = m.ledger().to_ndjson();
    let b = Bridge::new(Scripted::new(&[500; 100]), "http://svc");
    b.register(fast("GetIns")).unwrap();
    let req = pending(&m, &iid, "GetIns").unwrap();
    let d = b.deliver(&req).await.unwrap();
    assert_eq!(
        (d.last_status, d.attempts, d.last_http_status),
        (DeliveryStatus::Exhausted, 6, Some(500))
    );
    assert!(pending(&m, &iid, "GetIns").is_some());
    assert_eq!(m.ledger().to_ndjson(), before);

    let b = Bridge::new(Down, "http://svc");
    b.register(WebhookRegistration {
        max_retries: 2,
        ..fast("GetIns")
    })
    .unwrap();
    let d = b.deliver(&req).await.unwrap();
    assert_eq!(
        (d.last_status, d.attempts, d.last_http_status),
        (DeliveryStatus::Exhausted, 3, None)
    );
}

#[tokio::test]
async fn unmatched_tasks_are_not_delivered() {
    let (m, iid) = monitor_at_fork();
    let b = Bridge::new(Scripted::new(&[]), "http://svc");
    b.register(fast("GetIns")).unwrap();
    assert!(b.deliver(&pending(&m, &iid, "GetTransp").unwrap()).await.is_none());
    assert!(b.transport().seen.lock().unwrap().is_empty());
}

#[test]
fn callbacks_complete_once() {
    let (mut m, iid) = monitor_at_fork();
    let req = pending(&m, &iid, "GetIns").unwrap();
    let outs = sign_outputs(&m, &req);
    let signer = public_hex(&seller());
    assert!(matches!(
        handle_callback(&mut m, "nope", outs.clone(), &signer),
        Err(EngineError::BadToken)
    ));
    let fx = handle_callback(&mut m, &req.callback_token, outs.clone(), &signer).unwrap();
    assert!(fx.record_kinds().contains(&"TaskCompleted"));
    for _ in 0..3 {
        assert!(matches!(
            handle_callback(&mut m, &req.callback_token, outs.clone(), &signer),
            Err(EngineError::BadToken)
        ));
    }
    assert_eq!(task_completed_count(&m), 3);
}

#[test]
fn unsigned_outputs_are_rejected() {
    let (mut m, iid) = monitor_at_fork();
    let req = pending(&m, &iid, "GetIns").unwrap();
    let mut outs = sign_outputs(&m, &req);
    outs[0].signature = String::new();
    let r = handle_callback(&mut m, &req.callback_token, outs, &public_hex(&seller()));
    assert!(matches!(r, Err(EngineError::BadSignature)), "{r:?}");
    assert!(pending(&m, &iid, "GetIns").is_some());
}

#[tokio::test]
async fn inline_reply_over_http_completes_the_task() {
    let (m, iid) = monitor_at_fork();
    let m = Arc::new(Mutex::new(m));

    // The responder checks the HMAC, stores the insurance document and answers inline.
    let docs = m.lock().unwrap().docs().clone();
    let app = Router::new().route(
        "/insure",
        post(move |headers: HeaderMap, body: Bytes| {
            let docs = docs.clone();
            async move {
                let sig = headers[SIGNATURE_HEADER].to_str().unwrap();
                assert!(verify_body("insurer-secret", &body, sig));
                let req: Value = serde_json::from_slice(&body).unwrap();
                let cid = docs.put(b"insurance policy 42").unwrap();
                let iid = req["instanceId"].as_str().unwrap();
                let mut meta = Map::new();
                meta.insert("premium".into(), json!(120));
                let out = OutputSubmission::signed(&seller(), iid, "Insurance", 0, &cid, meta);
                Json(json!({ "outputs": [out] }))
            }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });

    let b = Bridge::new(HttpTransport::default(), "http://svc");
    b.register(WebhookRegistration::new(
        "GetIns",
        &format!("http://{addr}/insure"),
        "insurer-secret",
    ))
    .unwrap();
    let req = pending(&m.lock().unwrap(), &iid, "GetIns").unwrap();
    let d = b.deliver(&req).await.unwrap();
    assert_eq!(d.last_status, DeliveryStatus::Delivered);
    let reply = d.reply.expect("inline outputs");

    let mut m = m.lock().unwrap();
    let fx = complete_inline(&mut m, &req, reply).unwrap();
    assert_eq!(fx.record_kinds()[..2], ["TaskCompleted", "Attestation"]);
    assert!(pending(&m, &iid, "GetIns").is_none());
    let ins = m.instance(&iid).unwrap().latest("Insurance").unwrap().clone();
    assert_eq!(ins.metadata["premium"], 120);
    assert_eq!(m.docs().get(&ins.cid).unwrap(), b"insurance policy 42");
}
