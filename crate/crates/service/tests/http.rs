mod support;

use std::time::Duration;

use axum::routing::post;
use axum::{Json, Router};
use bpmnchain::crypto::{cid_of, public_hex, sign_hex};
use bpmnchain::docstore::attestation_message;
use bpmnchain::engine::{abort_message, OutputSubmission};
use bpmnchain_bridge::{verify_body, SIGNATURE_HEADER};
use serde_json::{json, Value};
use support::{fixture, lane_key, Client, Server};

const SALE: &str = "harvester-sale.bpmn";

#[tokio::test]
async fn models_deploy_once_and_can_be_fetched() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path(), 1).await;
    let c = Client::new(&s.base);
    let (status, body) = c.post_bytes("/models", fixture(SALE)).await;
    assert_eq!(status, 201);
    let pid = body["programId"].as_str().unwrap();
    assert!(pid.starts_with("cid:"));
    assert_eq!(body["actors"], json!(["Seller"]));
    let (status, again) = c.post_bytes("/models", fixture(SALE)).await;
    assert_eq!((status, again["error"].as_str()), (409, Some("DuplicateProgram")));
    let (status, m) = c.get(&format!("/models/{pid}")).await;
    assert_eq!(status, 200);
    assert_eq!(m["program"]["version"], 1);
    assert_eq!(c.get("/models/cid:00").await.0, 404);
    let (status, body) = c.post_bytes("/models", fixture("unbalanced.bpmn")).await;
    assert_eq!(status, 400);
    assert!(body["message"].as_str().unwrap().contains("Split"), "{body}");
    let (status, dry) = c.post_bytes("/models/compile", fixture(SALE)).await;
    assert_eq!((status, dry["programId"].as_str()), (200, Some(pid)));
}

#[tokio::test]
async fn responses_are_canonical_json() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path(), 1).await;
    let c = Client::new(&s.base);
    let (_, iid) = c.start_instance(SALE).await;
    let text = c
        .http
        .get(s.url(&format!("/instances/{iid}")))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(text, bpmnchain::canonical::to_string(&v));
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path(), 1).await;
    let c = Client::new(&s.base);
    assert_eq!(c.get("/instances/inst:nope").await.0, 404);
    assert_eq!(c.get("/instances/inst:nope/tasks").await.0, 404);
    assert_eq!(c.get("/instances/inst:nope/events").await.0, 404);
    assert_eq!(c.get(&format!("/documents/{}", cid_of(b"never stored"))).await.0, 404);
    let (status, _) = c
        .post_json("/instances", &json!({ "programId": "cid:00", "actorBindings": {} }))
        .await;
    assert_eq!(status, 404);
    let (_, iid) = c.start_instance(SALE).await;
    let (status, _) = c
        .post_json(
            &format!("/instances/{iid}/tasks/NoSuchTask/complete"),
            &json!({ "callbackToken": "x", "actor": "y", "outputs": [] }),
        )
        .await;
    assert_eq!(status, 404);
}

#[tokio::test]
async fn harvester_sale_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path(), 2).await;
    let c = Client::new(&s.base);
    let (_, iid) = c.start_instance(SALE).await;
    let tasks = c.pending(&iid).await;
    assert_eq!(tasks.len(), 1);
    assert_eq!(tasks[0]["taskName"], "RecAgr");
    assert!(!tasks[0]["purpose"].as_str().unwrap().is_empty());
    assert_eq!(tasks[0]["callbackToken"].as_str().unwrap().len(), 64);

    c.complete(&iid, "RecAgr").await;
    let body = c.complete(&iid, "GetTrReq").await;
    assert_eq!(body["newTasks"], json!(["GetIns", "GetTransp"]));
    let ins = c.task(&iid, "GetIns").await;
    assert_eq!(ins["inputs"][0]["name"], "TrRequirements");
    assert_eq!(ins["inputs"][0]["cid"], cid_of(b"GetTrReq/TrRequirements").as_str());
    for t in ["GetTransp", "GetIns", "DoTransp", "RecAndFin"] {
        c.complete(&iid, t).await;
    }
    let (_, snap) = c.get(&format!("/instances/{iid}")).await;
    assert_eq!(snap["status"], "Completed");
    assert_eq!(snap["data"].as_object().unwrap().len(), 5);

    let (_, events) = c.get(&format!("/instances/{iid}/events")).await;
    let names: Vec<&str> = events
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["name"].as_str().unwrap())
        .collect();
    assert_eq!(names.last(), Some(&"InstanceCompleted"));
    assert_eq!(names.iter().filter(|n| **n == "Attestation").count(), 5);

    let (_, ledger) = c.get("/ledger/blocks").await;
    let (_, tail) = c.get("/ledger/blocks?from=3").await;
    let heights: Vec<u64> = tail["blocks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["height"].as_u64().unwrap())
        .collect();
    assert_eq!(heights.first(), Some(&3));
    assert_eq!(heights.last().copied(), ledger["height"].as_u64());
    assert_eq!(c.get("/ledger/verify").await.1["valid"], true);

    let doc = c
        .http
        .get(s.url(&format!("/documents/{}", cid_of(b"GetIns/Insurance"))))
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap();
    assert_eq!(&doc[..], b"GetIns/Insurance");
    let (_, atts) = c.get(&format!("/instances/{iid}/attestations/Insurance")).await;
    assert_eq!(atts[0]["version"], 0);
    assert_eq!(atts[0]["author"], public_hex(&lane_key("Seller")).as_str());
}

#[tokio::test]
async fn completion_errors_map_to_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path(), 1).await;
    let c = Client::new(&s.base);
    let (_, iid) = c.start_instance(SALE).await;
    let task = c.task(&iid, "RecAgr").await;
    let seller = lane_key("Seller");

    // Signed by a key that is not bound to the lane.
    let stranger = lane_key("Stranger");
    let (status, body) = c
        .complete_form(&iid, "RecAgr", c.completion_form(&iid, &task, &stranger))
        .await;
    assert_eq!((status, body["error"].as_str()), (401, Some("WrongActor")));

    // Right actor, signature over the wrong cid.
    let bytes = b"agreement".to_vec();
    let cid = c.post_bytes("/documents", bytes.clone()).await.1["cid"]
        .as_str()
        .unwrap()
        .to_string();
    let bad_sig = sign_hex(&seller, &attestation_message(&iid, "SalesAgr", 0, &cid_of(b"other")));
    let req = json!({
        "callbackToken": task["callbackToken"],
        "actor": public_hex(&seller),
        "outputs": [{ "name": "SalesAgr", "cid": cid, "metadata": {}, "signature": bad_sig }],
    });
    let (status, body) = c
        .post_json(&format!("/instances/{iid}/tasks/RecAgr/complete"), &req)
        .await;
    assert_eq!((status, body["error"].as_str()), (401, Some("BadSignature")));

    let wrong_name = OutputSubmission::signed(&seller, &iid, "Insurance", 0, &cid, Default::default());
    let req = json!({ "callbackToken": task["callbackToken"], "actor": public_hex(&seller), "outputs": [wrong_name] });
    let (status, body) = c
        .post_json(&format!("/instances/{iid}/tasks/RecAgr/complete"), &req)
        .await;
    assert_eq!((status, body["error"].as_str()), (400, Some("OutputMismatch")));

    let (status, _) = c
        .post_json(
            &format!("/instances/{iid}/tasks/RecAgr/complete"),
            &json!({ "outputs": 3 }),
        )
        .await;
    assert_eq!(status, 400);

    // A good completion through JSON with a stored document, then a replay of it.
    let good = OutputSubmission::signed(&seller, &iid, "SalesAgr", 0, &cid, Default::default());
    let req = json!({ "callbackToken": task["callbackToken"], "actor": public_hex(&seller), "outputs": [good] });
    let (status, body) = c
        .post_json(&format!("/instances/{iid}/tasks/RecAgr/complete"), &req)
        .await;
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["newTasks"], json!(["GetTrReq"]));
    let (status, body) = c
        .post_json(&format!("/instances/{iid}/tasks/RecAgr/complete"), &req)
        .await;
    assert_eq!((status, body["error"].as_str()), (409, Some("BadToken")));
    let (status, _) = c
        .complete_form(&iid, "RecAgr", c.completion_form(&iid, &task, &seller))
        .await;
    assert_eq!(status, 409);
    let (_, events) = c.get(&format!("/instances/{iid}/events")).await;
    let completed = events
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["name"] == "TaskCompleted")
        .count();
    assert_eq!(completed, 1);
}

#[tokio::test]
async fn multipart_needs_a_signature_per_document() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path(), 1).await;
    let c = Client::new(&s.base);
    let (_, iid) = c.start_instance(SALE).await;
    let task = c.task(&iid, "RecAgr").await;
    let form = reqwest::multipart::Form::new()
        .text("token", task["callbackToken"].as_str().unwrap().to_string())
        .text("actor", public_hex(&lane_key("Seller")))
        .part("doc.SalesAgr", reqwest::multipart::Part::bytes(b"x".to_vec()));
    let (status, _) = c.complete_form(&iid, "RecAgr", form).await;
    assert_eq!(status, 401);
    assert_eq!(c.pending(&iid).await.len(), 1);
}

#[tokio::test]
async fn abort_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path(), 1).await;
    let c = Client::new(&s.base);
    let (_, iid) = c.start_instance(SALE).await;
    let seller = lane_key("Seller");
    let path = format!("/instances/{iid}/scopes/Seller/abort");
    let forged = json!({ "reason": "r", "actor": public_hex(&seller), "signature": sign_hex(&seller, b"other") });
    assert_eq!(c.post_json(&path, &forged).await.0, 401);
    let (status, _) = c
        .post_json(&format!("/instances/{iid}/scopes/Nope/abort"), &forged)
        .await;
    assert_eq!(status, 404);
    let sig = sign_hex(&seller, &abort_message(&iid, "Seller", "buyer withdrew"));
    let req = json!({ "reason": "buyer withdrew", "actor": public_hex(&seller), "signature": sig });
    let (status, body) = c.post_json(&path, &req).await;
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["status"], "Aborted");
    let kinds: Vec<&str> = body["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["method"].as_str().unwrap())
        .collect();
    assert_eq!(kinds, ["ScopeAborted", "InstanceAborted"]);
    assert_eq!(c.post_json(&path, &req).await.0, 409);
    assert!(c.pending(&iid).await.is_empty());
}

#[tokio::test]
async fn webhooks_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path(), 1).await;
    let c = Client::new(&s.base);
    let reg = json!({ "pattern": "GetIns", "url": "http://127.0.0.1:9/hook", "sharedSecret": "k" });
    let (status, body) = c.post_json("/webhooks", &reg).await;
    assert_eq!((status, body["id"].as_str()), (201, Some("wh1")));
    assert_eq!(c.post_json("/webhooks", &reg).await.0, 409);
    let bad = json!({ "pattern": "GetTransp", "url": "not a url", "sharedSecret": "k" });
    assert_eq!(c.post_json("/webhooks", &bad).await.0, 400);
    let (_, list) = c.get("/webhooks").await;
    assert_eq!(list[0]["maxRetries"], 5);
    assert!(list[0].get("sharedSecret").is_none());
    s.stop();

    // Registrations survive a restart.
    let s = Server::start(dir.path(), 1).await;
    assert_eq!(s.svc.bridge.registrations().len(), 1);
}

#[tokio::test]
async fn webhook_responder_completes_a_task_inline() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path(), 1).await;
    let c = Client::new(&s.base);

    let base = s.base.clone();
    let responder = Router::new().route(
        "/insure",
        post(move |headers: axum::http::HeaderMap, body: axum::body::Bytes| {
            let base = base.clone();
            async move {
                let sig = headers[SIGNATURE_HEADER].to_str().unwrap().to_string();
                assert!(verify_body("insurer", &body, &sig));
                let req: Value = serde_json::from_slice(&body).unwrap();
                assert_eq!(req["taskName"], "GetIns");
                let policy = b"policy for the harvester".to_vec();
                let stored: Value = reqwest::Client::new()
                    .post(format!("{base}/documents"))
                    .body(policy)
                    .send()
                    .await
                    .unwrap()
                    .json()
                    .await
                    .unwrap();
                let cid = stored["cid"].as_str().unwrap();
                let out = OutputSubmission::signed(
                    &lane_key("Seller"),
                    req["instanceId"].as_str().unwrap(),
                    "Insurance",
                    0,
                    cid,
                    Default::default(),
                );
                Json(json!({ "outputs": [out] }))
            }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, responder).await.unwrap() });
    let reg = json!({ "pattern": "GetIns", "url": format!("http://{addr}/insure"), "sharedSecret": "insurer" });
    assert_eq!(c.post_json("/webhooks", &reg).await.0, 201);

    let (_, iid) = c.start_instance(SALE).await;
    c.complete(&iid, "RecAgr").await;
    c.complete(&iid, "GetTrReq").await;
    let mut done = false;
    for _ in 0..100 {
        let pending: Vec<String> = c
            .pending(&iid)
            .await
            .iter()
            .map(|t| t["taskId"].as_str().unwrap().to_string())
            .collect();
        if pending == ["GetTransp"] {
            done = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert!(done, "GetIns was not completed by the responder");
    let (_, deliveries) = c.get("/webhooks/deliveries").await;
    assert_eq!(deliveries[0]["lastStatus"], "delivered");
    assert_eq!(deliveries[0]["attempts"], 1);
    let (_, snap) = c.get(&format!("/instances/{iid}")).await;
    assert_eq!(
        snap["data"]["Insurance"][0]["cid"],
        cid_of(b"policy for the harvester").as_str()
    );
}

#[tokio::test]
async fn restart_restores_state_and_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path(), 3).await;
    let c = Client::new(&s.base);
    let (_, iid) = c.start_instance(SALE).await;
    c.complete(&iid, "RecAgr").await;
    c.complete(&iid, "GetTrReq").await;
    let before_snap = c.get(&format!("/instances/{iid}")).await.1;
    let before_tasks = c.pending(&iid).await;
    let before_head = c.get("/ledger/verify").await.1;
    s.stop();

    let s = Server::start(dir.path(), 3).await;
    let c = Client::new(&s.base);
    assert_eq!(c.get(&format!("/instances/{iid}")).await.1, before_snap);
    assert_eq!(c.pending(&iid).await, before_tasks);
    assert_eq!(c.get("/ledger/verify").await.1, before_head);
    for t in ["GetIns", "GetTransp", "DoTransp", "RecAndFin"] {
        c.complete(&iid, t).await;
    }
    assert_eq!(c.get(&format!("/instances/{iid}")).await.1["status"], "Completed");
}
