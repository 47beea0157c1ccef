//! HTTP endpoints. Every JSON response body is canonical JSON.

use std::collections::BTreeMap;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use bpmnchain::canonical;
use bpmnchain::compiler::{compile, CompileError, MonitorProgram};
use bpmnchain::docstore::{DocError, MAX_DOCUMENT_BYTES};
use bpmnchain::engine::{Effects, EngineError, OutputSubmission};
use bpmnchain::ledger::LedgerError;
use bpmnchain_bridge::{BridgeError, WebhookRegistration};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::service::{dispatch, Shared};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "NotFound", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        canonical_json(self.status, &json!({ "error": self.kind, "message": self.message }))
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        use EngineError::*;
        let (status, kind) = match &e {
            DuplicateProgram(_) => (StatusCode::CONFLICT, "DuplicateProgram"),
            BadSignature => (StatusCode::UNAUTHORIZED, "BadSignature"),
            WrongActor => (StatusCode::UNAUTHORIZED, "WrongActor"),
            BadKey(_) => (StatusCode::BAD_REQUEST, "BadKey"),
            InvalidProgram(_) => (StatusCode::BAD_REQUEST, "InvalidProgram"),
            UnknownProgram(_) => (StatusCode::NOT_FOUND, "UnknownProgram"),
            MissingActor(_) => (StatusCode::BAD_REQUEST, "MissingActor"),
            UnexpectedActor(_) => (StatusCode::BAD_REQUEST, "UnexpectedActor"),
            UnknownInstance(_) => (StatusCode::NOT_FOUND, "UnknownInstance"),
            NotRunning(_) => (StatusCode::CONFLICT, "NotRunning"),
            EmptyQueue => (StatusCode::CONFLICT, "EmptyQueue"),
            GuardFault(_) => (StatusCode::CONFLICT, "GuardFault"),
            BadToken => (StatusCode::CONFLICT, "BadToken"),
            OutputMismatch { .. } => (StatusCode::BAD_REQUEST, "OutputMismatch"),
            MetadataTooLarge(_) => (StatusCode::BAD_REQUEST, "MetadataTooLarge"),
            UnknownCid(_) => (StatusCode::BAD_REQUEST, "UnknownCid"),
            UnknownScope(_) => (StatusCode::NOT_FOUND, "UnknownScope"),
            ScopeNotActive(_) => (StatusCode::CONFLICT, "ScopeNotActive"),
            ReplayDiverged { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "ReplayDiverged"),
            Ledger(LedgerError::BadNonce { .. }) => (StatusCode::CONFLICT, "BadNonce"),
            Ledger(LedgerError::BadSignature) => (StatusCode::UNAUTHORIZED, "BadSignature"),
            Ledger(LedgerError::Rejected(_)) => (StatusCode::BAD_REQUEST, "Rejected"),
            Ledger(LedgerError::Storage { .. }) => (StatusCode::INTERNAL_SERVER_ERROR, "Storage"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<DocError> for ApiError {
    fn from(e: DocError) -> Self {
        let (status, kind) = match &e {
            DocError::TooLarge(_) => (StatusCode::PAYLOAD_TOO_LARGE, "TooLarge"),
            DocError::UnknownCid(_) => (StatusCode::NOT_FOUND, "UnknownCid"),
            DocError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "Storage"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<BridgeError> for ApiError {
    fn from(e: BridgeError) -> Self {
        let (status, kind) = match &e {
            BridgeError::DuplicatePattern(_) => (StatusCode::CONFLICT, "DuplicatePattern"),
            BridgeError::BadUrl(_) => (StatusCode::BAD_REQUEST, "BadUrl"),
            BridgeError::BadPattern(_) => (StatusCode::BAD_REQUEST, "BadPattern"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl From<CompileError> for ApiError {
    fn from(e: CompileError) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "CompileError", e.to_string())
    }
}

type ApiResult = Result<Response, ApiError>;

pub fn canonical_json<T: Serialize + ?Sized>(status: StatusCode, body: &T) -> Response {
    (
        status,
        [(header::CONTENT_TYPE, "application/json")],
        canonical::to_vec(body),
    )
        .into_response()
}

fn ok<T: Serialize + ?Sized>(body: &T) -> ApiResult {
    Ok(canonical_json(StatusCode::OK, body))
}

fn created<T: Serialize + ?Sized>(body: &T) -> ApiResult {
    Ok(canonical_json(StatusCode::CREATED, body))
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("bad JSON body: {e}")))
}

fn is_json(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"))
}

/// What an operation did, for responses.
fn effects_body(fx: &Effects, status: impl Serialize) -> Value {
    let records: Vec<Value> = fx
        .records
        .iter()
        .map(|t| json!({ "method": t.method, "txId": t.tx_id }))
        .collect();
    let new_tasks: Vec<&str> = fx.new_tasks.iter().map(|t| t.task_id.as_str()).collect();
    json!({ "records": records, "newTasks": new_tasks, "status": status, "fault": fx.fault })
}

pub fn router(svc: Shared) -> Router {
    Router::new()
        .route("/models", get(list_models).post(deploy_model))
        .route("/models/compile", post(compile_only))
        .route("/models/{pid}", get(get_model))
        .route("/instances", get(list_instances).post(create_instance))
        .route("/instances/{iid}", get(get_instance))
        .route("/instances/{iid}/tasks", get(get_tasks))
        .route("/instances/{iid}/tasks/{tid}/complete", post(complete_task))
        .route("/instances/{iid}/scopes/{sid}/abort", post(abort_scope))
        .route("/instances/{iid}/attestations", post(attest))
        .route("/instances/{iid}/attestations/{name}", get(get_attestations))
        .route("/instances/{iid}/events", get(get_events))
        .route("/documents", post(put_document))
        .route("/documents/{cid}", get(get_document))
        .route("/ledger/blocks", get(get_blocks))
        .route("/ledger/verify", get(verify_ledger))
        .route("/webhooks", get(list_webhooks).post(register_webhook))
        .route("/webhooks/deliveries", get(list_deliveries))
        .layer(DefaultBodyLimit::max(MAX_DOCUMENT_BYTES * 2))
        .with_state(svc)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct DeployRequest {
    bpmn: String,
    deployer: Option<String>,
    signature: Option<String>,
}

/// Body is BPMN XML, or JSON `{bpmn, deployer, signature}` where the
/// deployer signs the program id.
async fn deploy_model(State(svc): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let req = if is_json(&headers) {
        parse_json(&body)?
    } else {
        DeployRequest {
            bpmn: String::from_utf8(body.to_vec()).map_err(|_| ApiError::bad_request("model is not UTF-8"))?,
            deployer: None,
            signature: None,
        }
    };
    let program = compile(req.bpmn.as_bytes())?.program;
    let actors = program.actors.clone();
    let mut m = svc.monitor();
    let pid = match (req.deployer, req.signature) {
        (Some(d), Some(s)) => m.deploy_program(program, &d, &s)?,
        (None, None) => m.deploy_with_key(program, svc.key())?,
        _ => return Err(ApiError::bad_request("deployer and signature go together")),
    };
    created(&json!({ "programId": pid, "actors": actors }))
}

async fn compile_only(body: Bytes) -> ApiResult {
    let program = compile(&body)?.program;
    ok(&json!({ "programId": program.program_id(), "program": program }))
}

async fn list_models(State(svc): State<Shared>) -> ApiResult {
    let m = svc.monitor();
    let ids: Vec<&str> = m.program_ids().collect();
    ok(&json!({ "programs": ids }))
}

async fn get_model(State(svc): State<Shared>, Path(pid): Path<String>) -> ApiResult {
    let m = svc.monitor();
    let program: &MonitorProgram = m
        .program(&pid)
        .ok_or_else(|| ApiError::not_found(format!("unknown program {pid}")))?;
    ok(&json!({ "programId": pid, "program": program }))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CreateRequest {
    program_id: String,
    actor_bindings: BTreeMap<String, String>,
    creator: Option<String>,
    signature: Option<String>,
}

async fn create_instance(State(svc): State<Shared>, body: Bytes) -> ApiResult {
    let req: CreateRequest = parse_json(&body)?;
    let (iid, fx, status) = {
        let mut m = svc.monitor();
        let iid = match (req.creator, req.signature) {
            (Some(c), Some(s)) => m.create_instance(&req.program_id, req.actor_bindings, &c, &s)?,
            (None, None) => m.create_with_key(&req.program_id, req.actor_bindings, svc.key())?,
            _ => return Err(ApiError::bad_request("creator and signature go together")),
        };
        let fx = m.drain(&iid)?;
        let status = m.instance(&iid).map(|i| i.status);
        (iid, fx, status)
    };
    let mut body = effects_body(&fx, status);
    body["instanceId"] = json!(iid);
    dispatch(&svc, fx.new_tasks);
    created(&body)
}

async fn list_instances(State(svc): State<Shared>) -> ApiResult {
    let m = svc.monitor();
    let list: Vec<Value> = m
        .instances()
        .map(|i| json!({ "instanceId": i.instance_id, "programId": i.program_id, "status": i.status }))
        .collect();
    ok(&json!({ "instances": list }))
}

async fn get_instance(State(svc): State<Shared>, Path(iid): Path<String>) -> ApiResult {
    let snap = svc.monitor().snapshot(&iid).ok_or(EngineError::UnknownInstance(iid))?;
    ok(&snap)
}

async fn get_tasks(State(svc): State<Shared>, Path(iid): Path<String>) -> ApiResult {
    let tasks = svc.monitor().pending_tasks(&iid)?;
    ok(&tasks)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CompleteRequest {
    callback_token: String,
    actor: String,
    outputs: Vec<OutputSubmission>,
}

/// Multipart fields: `token`, `actor`, and per output `doc.<name>` (or
/// `cid.<name>` for a stored document), `meta.<name>` (JSON object) and
/// `sig.<name>`.
async fn completion_from_multipart(svc: &Shared, mut mp: Multipart) -> Result<CompleteRequest, ApiError> {
    let mut token = None;
    let mut actor = None;
    let mut cids: BTreeMap<String, String> = BTreeMap::new();
    let mut metas: BTreeMap<String, Map<String, Value>> = BTreeMap::new();
    let mut sigs: BTreeMap<String, String> = BTreeMap::new();
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::bad_request(e.to_string());
    while let Some(field) = mp.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(bad)?;
        let text =
            || String::from_utf8(data.to_vec()).map_err(|_| ApiError::bad_request(format!("{name} is not UTF-8")));
        match name.split_once('.') {
            Some(("doc", obj)) => {
                cids.insert(obj.to_string(), svc.monitor().docs().put(&data)?);
            }
            Some(("cid", obj)) => {
                cids.insert(obj.to_string(), text()?.trim().to_string());
            }
            Some(("meta", obj)) => {
                let v: Value = parse_json(&data)?;
                let Value::Object(map) = v else {
                    return Err(ApiError::bad_request(format!("{name} must be a JSON object")));
                };
                metas.insert(obj.to_string(), map);
            }
            Some(("sig", obj)) => {
                sigs.insert(obj.to_string(), text()?.trim().to_string());
            }
            _ if name == "token" || name == "callbackToken" => token = Some(text()?.trim().to_string()),
            _ if name == "actor" => actor = Some(text()?.trim().to_string()),
            _ => return Err(ApiError::bad_request(format!("unexpected field {name}"))),
        }
    }
    let mut outputs = Vec::new();
    for (name, cid) in cids {
        let signature = sigs
            .remove(&name)
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "BadSignature", format!("no sig.{name}")))?;
        outputs.push(OutputSubmission {
            metadata: metas.remove(&name).unwrap_or_default(),
            name,
            cid,
            signature,
        });
    }
    if let Some(name) = sigs.keys().chain(metas.keys()).next() {
        return Err(ApiError::bad_request(format!("no document for {name}")));
    }
    Ok(CompleteRequest {
        callback_token: token.ok_or_else(|| ApiError::bad_request("missing token"))?,
        actor: actor.ok_or_else(|| ApiError::bad_request("missing actor"))?,
        outputs,
    })
}

async fn complete_task(
    State(svc): State<Shared>,
    Path((iid, tid)): Path<(String, String)>,
    request: Request,
) -> ApiResult {
    let req = if is_json(request.headers()) {
        let body = Bytes::from_request(request, &())
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        parse_json(&body)?
    } else {
        let mp = Multipart::from_request(request, &())
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        completion_from_multipart(&svc, mp).await?
    };
    let (fx, status) = {
        let mut m = svc.monitor();
        let inst = m
            .instance(&iid)
            .ok_or_else(|| EngineError::UnknownInstance(iid.clone()))?;
        if !inst.tasks.contains_key(&tid) {
            return Err(ApiError::not_found(format!("no task {tid} was requested in {iid}")));
        }
        let fx = m.complete_task(&iid, &tid, &req.callback_token, req.outputs, &req.actor)?;
        (fx, m.instance(&iid).map(|i| i.status))
    };
    let body = effects_body(&fx, status);
    dispatch(&svc, fx.new_tasks);
    ok(&body)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct AbortRequest {
    reason: String,
    actor: String,
    signature: String,
}

async fn abort_scope(State(svc): State<Shared>, Path((iid, sid)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let req: AbortRequest = parse_json(&body)?;
    let mut m = svc.monitor();
    let fx = m.abort_scope(&iid, &sid, &req.reason, &req.actor, &req.signature)?;
    let status = m.instance(&iid).map(|i| i.status);
    ok(&effects_body(&fx, status))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct AttestRequest {
    data_object_name: String,
    cid: String,
    author: String,
    signature: String,
}

async fn attest(State(svc): State<Shared>, Path(iid): Path<String>, body: Bytes) -> ApiResult {
    let req: AttestRequest = parse_json(&body)?;
    let att = svc
        .monitor()
        .attest(&iid, &req.data_object_name, &req.cid, &req.author, &req.signature)?;
    created(&att)
}

async fn get_attestations(State(svc): State<Shared>, Path((iid, name)): Path<(String, String)>) -> ApiResult {
    let m = svc.monitor();
    m.instance(&iid)
        .ok_or_else(|| EngineError::UnknownInstance(iid.clone()))?;
    ok(&m.attestations(&iid, &name))
}

async fn get_events(State(svc): State<Shared>, Path(iid): Path<String>) -> ApiResult {
    let m = svc.monitor();
    m.instance(&iid)
        .ok_or_else(|| EngineError::UnknownInstance(iid.clone()))?;
    ok(&m.ledger().get_events(&iid))
}

async fn put_document(State(svc): State<Shared>, body: Bytes) -> ApiResult {
    let cid = svc.monitor().docs().put(&body)?;
    created(&json!({ "cid": cid, "sizeBytes": body.len() }))
}

async fn get_document(State(svc): State<Shared>, Path(cid): Path<String>) -> Result<Response, ApiError> {
    let bytes = svc.monitor().docs().get(&cid).ok_or(DocError::UnknownCid(cid))?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

#[derive(Deserialize)]
struct FromQuery {
    from: Option<u64>,
}

async fn get_blocks(State(svc): State<Shared>, Query(q): Query<FromQuery>) -> ApiResult {
    let m = svc.monitor();
    let l = m.ledger();
    ok(&json!({
        "height": l.height(),
        "headHash": l.head_hash(),
        "blocks": l.blocks_from(q.from.unwrap_or(0)),
    }))
}

async fn verify_ledger(State(svc): State<Shared>) -> ApiResult {
    let m = svc.monitor();
    let l = m.ledger();
    ok(&json!({ "valid": l.verify_chain(), "height": l.height(), "headHash": l.head_hash() }))
}

async fn register_webhook(State(svc): State<Shared>, body: Bytes) -> ApiResult {
    let reg: WebhookRegistration = parse_json(&body)?;
    let id = svc.register_webhook(reg)?;
    let pending = svc.all_pending();
    let body = json!({ "id": id });
    // Requests issued before the hook existed are offered to it too.
    dispatch(
        &svc,
        pending
            .into_iter()
            .filter(|t| svc.bridge.delivery(&t.instance_id, &t.task_id).is_none())
            .collect(),
    );
    created(&body)
}

async fn list_webhooks(State(svc): State<Shared>) -> ApiResult {
    let list: Vec<Value> = svc
        .bridge
        .registrations()
        .into_iter()
        .map(|r| {
            json!({
                "id": r.id,
                "pattern": r.registration.pattern,
                "url": r.registration.url,
                "maxRetries": r.registration.max_retries,
                "backoffBaseMs": r.registration.backoff_base_ms,
            })
        })
        .collect();
    ok(&list)
}

async fn list_deliveries(State(svc): State<Shared>) -> ApiResult {
    ok(&svc.bridge.deliveries())
}
