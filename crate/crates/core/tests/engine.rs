mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use bpmnchain::compiler::compile;
use bpmnchain::crypto::{key_from_seed, public_hex, sign_hex};
use bpmnchain::docstore::{verify_document, DocStore};
use bpmnchain::engine::{
    abort_message, EngineError, InstanceStatus, Monitor, OutputSubmission, ScopeState, TaskState, MAX_METADATA_BYTES,
};
use bpmnchain::ledger::Ledger;
use common::{fixture, Harness};
use serde_json::{json, Map, Value};

const SALE: &str = "harvester-sale.bpmn";

fn meta(name: &'static str, v: Value) -> BTreeMap<&'static str, Value> {
    BTreeMap::from([(name, v)])
}

#[test]
fn create_queues_one_start_per_lane() {
    let h = Harness::new(SALE);
    let inst = h.monitor.instance(&h.iid).unwrap();
    assert_eq!(inst.status, InstanceStatus::Running);
    let names: Vec<&str> = inst.event_queue().iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, ["start:Seller"]);
    assert_eq!(h.record_kinds(), ["DeployProgram", "InstanceCreated"]);
}

#[test]
fn collab_start_events_follow_lane_order() {
    let h = Harness::new("harvester-sale-collab.bpmn");
    let inst = h.monitor.instance(&h.iid).unwrap();
    let queue: Vec<(u64, &str)> = inst.event_queue().iter().map(|e| (e.seq, e.name.as_str())).collect();
    // Lane ids sorted by byte order.
    assert_eq!(
        queue,
        [
            (0, "start:Buyer"),
            (1, "start:InsComp"),
            (2, "start:ReqRegistry"),
            (3, "start:SalesDep"),
            (4, "start:ShipDep"),
            (5, "start:Transp"),
        ]
    );
}

#[test]
fn missing_actor_is_rejected() {
    let mut h = Harness::new("harvester-sale-collab.bpmn");
    let mut bindings: BTreeMap<String, String> = h.keys.iter().map(|(l, k)| (l.clone(), public_hex(k))).collect();
    bindings.remove("Transp");
    let err = h
        .monitor
        .create_with_key(&h.program_id.clone(), bindings, &key_from_seed("creator"))
        .unwrap_err();
    assert!(matches!(err, EngineError::MissingActor(l) if l == "Transp"));
}

#[test]
fn unknown_program_is_rejected() {
    let mut h = Harness::new(SALE);
    let err = h
        .monitor
        .create_with_key("cid:00", BTreeMap::new(), &key_from_seed("creator"))
        .unwrap_err();
    assert!(matches!(err, EngineError::UnknownProgram(_)));
}

#[test]
fn duplicate_deploy_and_bad_signature() {
    let mut h = Harness::new(SALE);
    let program = h.monitor.program(&h.program_id).unwrap().clone();
    let err = h
        .monitor
        .deploy_with_key(program.clone(), &key_from_seed("deployer"))
        .unwrap_err();
    assert!(matches!(err, EngineError::DuplicateProgram(_)));
    let deployer = key_from_seed("deployer");
    let forged = sign_hex(&deployer, b"something else");
    let err = h
        .monitor
        .deploy_program(program, &public_hex(&deployer), &forged)
        .unwrap_err();
    assert!(matches!(err, EngineError::BadSignature));
}

#[test]
fn first_step_opens_top_scope_and_requests_recagr() {
    let mut h = Harness::new(SALE);
    let iid = h.iid.clone();
    let fx = h.monitor.step(&iid).unwrap();
    assert_eq!(fx.record_kinds(), ["ScopeOpened", "TaskRequested"]);
    assert_eq!(fx.records[0].payload["scopeId"], "Seller");
    assert_eq!(fx.new_tasks.len(), 1);
    assert_eq!(fx.new_tasks[0].task_id, "RecAgr");
    assert!(matches!(h.monitor.step(&iid), Err(EngineError::EmptyQueue)));
}

#[test]
fn fresh_instance_quiesces_on_recagr() {
    let h = Harness::started(SALE);
    assert_eq!(h.pending(), ["RecAgr"]);
    let t = &h.monitor.pending_tasks(&h.iid).unwrap()[0];
    assert_eq!(t.callback_token.len(), 64);
    assert!(t.purpose.starts_with("Review the purchase offer"));
}

#[test]
fn harvester_sale_happy_path_completes() {
    let mut h = Harness::started(SALE);
    h.complete("RecAgr");
    assert_eq!(h.pending(), ["GetTrReq"]);
    h.complete("GetTrReq");
    assert_eq!(h.pending(), ["GetIns", "GetTransp"]);
    h.complete("GetIns");
    assert_eq!(h.pending(), ["GetTransp"]);
    h.complete("GetTransp");
    assert_eq!(h.pending(), ["DoTransp"]);
    h.complete("DoTransp");
    let fx = h.complete("RecAndFin");
    assert_eq!(fx.status_change, Some(InstanceStatus::Completed));
    assert!(h.pending().is_empty());

    let inst = h.monitor.instance(&h.iid).unwrap();
    assert_eq!(inst.status, InstanceStatus::Completed);
    assert!(inst.event_queue().is_empty());
    assert_eq!(inst.data.len(), 5);
    for (name, versions) in &inst.data {
        assert_eq!(versions.len(), 1, "{name}");
        let e = &versions[0];
        let att = &h.monitor.attestations(&h.iid, name)[0];
        let bytes = h.monitor.docs().get(&e.cid).unwrap();
        assert!(verify_document(&e.cid, &bytes, att, &e.author));
    }
    assert!(h.monitor.ledger().verify_chain());
    let events = h.monitor.ledger().get_events(&h.iid);
    assert_eq!(events.last().unwrap().name, "InstanceCompleted");
    assert_eq!(
        inst.scopes,
        BTreeMap::from([
            ("Seller".to_string(), ScopeState::Committed),
            ("Seller.r1".to_string(), ScopeState::Committed),
        ])
    );
}

#[test]
fn task_requested_carries_input_cids() {
    let mut h = Harness::started(SALE);
    h.complete("RecAgr");
    let sales = h
        .monitor
        .instance(&h.iid)
        .unwrap()
        .latest("SalesAgr")
        .unwrap()
        .cid
        .clone();
    let req = &h.monitor.pending_tasks(&h.iid).unwrap()[0];
    assert_eq!(req.inputs[0].name, "SalesAgr");
    assert_eq!(req.inputs[0].cid.as_deref(), Some(sales.as_str()));
    let tx = h
        .monitor
        .ledger()
        .txs()
        .filter(|t| t.method == "TaskRequested")
        .last()
        .unwrap();
    assert_eq!(tx.payload["inputs"][0]["cid"], json!(sales));
    assert!(tx.payload.get("callbackToken").is_none());
}

#[test]
fn join_waits_for_both_branches_in_either_order() {
    let run = |first: &str, second: &str| {
        let mut h = Harness::started(SALE);
        h.complete("RecAgr");
        h.complete("GetTrReq");
        h.complete(first);
        assert!(!h.pending().contains(&"DoTransp".to_string()));
        h.complete(second);
        assert_eq!(h.pending(), ["DoTransp"]);
        let inst = h.monitor.instance(&h.iid).unwrap();
        let kinds: Vec<String> = h.record_kinds();
        let join_at = kinds.iter().rposition(|k| k == "TaskCompleted").unwrap();
        (inst.machine_states().clone(), kinds[join_at + 2..].to_vec())
    };
    let (a_states, a_tail) = run("GetIns", "GetTransp");
    let (b_states, b_tail) = run("GetTransp", "GetIns");
    assert_eq!(a_states, b_states);
    assert_eq!(a_tail, b_tail);
    assert_eq!(a_tail, ["ScopeCommitted", "TaskRequested"]);
}

#[test]
fn wrong_outputs_are_rejected() {
    let mut h = Harness::started(SALE);
    let (token, outs, signer) = h.outputs("RecAgr", &BTreeMap::new());
    let iid = h.iid.clone();
    let err = h
        .monitor
        .complete_task(&iid, "RecAgr", &token, vec![], &signer)
        .unwrap_err();
    assert!(matches!(&err, EngineError::OutputMismatch { missing, .. } if missing == &["SalesAgr"]));
    let mut twice = outs.clone();
    twice.push(outs[0].clone());
    assert!(matches!(
        h.monitor.complete_task(&iid, "RecAgr", &token, twice, &signer),
        Err(EngineError::OutputMismatch { .. })
    ));
    let mut extra = outs.clone();
    extra.push(OutputSubmission {
        name: "Bogus".into(),
        ..outs[0].clone()
    });
    assert!(matches!(
        h.monitor.complete_task(&iid, "RecAgr", &token, extra, &signer),
        Err(EngineError::OutputMismatch { extra, .. }) if extra == ["Bogus"]
    ));
    assert_eq!(h.pending(), ["RecAgr"], "failed attempts change nothing");
}

#[test]
fn token_actor_signature_cid_and_metadata_checks() {
    let mut h = Harness::started(SALE);
    let iid = h.iid.clone();
    let (token, outs, signer) = h.outputs("RecAgr", &BTreeMap::new());

    let e = h
        .monitor
        .complete_task(&iid, "RecAgr", "deadbeef", outs.clone(), &signer)
        .unwrap_err();
    assert!(matches!(e, EngineError::BadToken));

    let stranger = public_hex(&key_from_seed("stranger"));
    let e = h
        .monitor
        .complete_task(&iid, "RecAgr", &token, outs.clone(), &stranger)
        .unwrap_err();
    assert!(matches!(e, EngineError::WrongActor));

    let mut unsigned = outs.clone();
    unsigned[0].signature = sign_hex(&key_from_seed("actor:Seller"), b"not the attestation");
    let e = h
        .monitor
        .complete_task(&iid, "RecAgr", &token, unsigned, &signer)
        .unwrap_err();
    assert!(matches!(e, EngineError::BadSignature));

    let mut unknown = outs.clone();
    unknown[0].cid = bpmnchain::crypto::cid_of(b"never stored");
    let e = h
        .monitor
        .complete_task(&iid, "RecAgr", &token, unknown, &signer)
        .unwrap_err();
    assert!(matches!(e, EngineError::UnknownCid(_)));

    let mut big = outs.clone();
    let mut m = Map::new();
    m.insert("blob".into(), json!("x".repeat(MAX_METADATA_BYTES)));
    big[0].metadata = m;
    let e = h
        .monitor
        .complete_task(&iid, "RecAgr", &token, big, &signer)
        .unwrap_err();
    assert!(matches!(e, EngineError::MetadataTooLarge(_)));

    h.monitor
        .complete_task(&iid, "RecAgr", &token, outs.clone(), &signer)
        .unwrap();
    let e = h
        .monitor
        .complete_task(&iid, "RecAgr", &token, outs, &signer)
        .unwrap_err();
    assert!(matches!(e, EngineError::BadToken));
}

#[test]
fn duplicate_callbacks_yield_one_completion() {
    let mut h = Harness::started(SALE);
    let (token, outs, signer) = h.outputs("RecAgr", &BTreeMap::new());
    let mut accepted = 0;
    for _ in 0..10 {
        if h.monitor.complete_by_token(&token, outs.clone(), &signer).is_ok() {
            accepted += 1;
        }
    }
    assert_eq!(accepted, 1);
    let completions = h.monitor.ledger().txs().filter(|t| t.method == "TaskCompleted").count();
    assert_eq!(completions, 1);
}

#[test]
fn xor_takes_guarded_or_default_flow() {
    let mut h = Harness::started("harvester-sale-xor.bpmn");
    h.try_complete_with("RecAgr", &meta("SalesAgr", json!({"accepted": true})))
        .unwrap();
    assert_eq!(h.pending(), ["GetTrReq"]);

    let mut h = Harness::started("harvester-sale-xor.bpmn");
    h.try_complete_with("RecAgr", &meta("SalesAgr", json!({"accepted": false})))
        .unwrap();
    assert_eq!(h.pending(), ["NotifyReject"]);
}

#[test]
fn xor_without_default_faults() {
    let mut h = Harness::started("harvester-sale-xor-nodefault.bpmn");
    let fx = h
        .try_complete_with(
            "RecAgr",
            &meta("SalesAgr", json!({"accepted": false, "status": "open"})),
        )
        .unwrap();
    assert_eq!(fx.status_change, Some(InstanceStatus::Faulted));
    let inst = h.monitor.instance(&h.iid).unwrap();
    assert_eq!(inst.status, InstanceStatus::Faulted);
    assert!(inst.fault.as_deref().unwrap().contains("no guard holds"));
    assert_eq!(h.record_kinds().last().unwrap(), "InstanceFaulted");
    let iid = h.iid.clone();
    assert!(matches!(
        h.monitor.run_until_quiescent(&iid),
        Err(EngineError::NotRunning(InstanceStatus::Faulted))
    ));
}

#[test]
fn missing_guard_field_faults() {
    let mut h = Harness::started("harvester-sale-xor.bpmn");
    let fx = h.try_complete_with("RecAgr", &meta("SalesAgr", json!({}))).unwrap();
    assert_eq!(fx.status_change, Some(InstanceStatus::Faulted));
    assert!(fx.fault.unwrap().contains("missing field"));
}

#[test]
fn nested_abort_cancels_inside_tasks() {
    let mut h = Harness::started(SALE);
    h.complete("RecAgr");
    h.complete("GetTrReq");
    let iid = h.iid.clone();
    let seller = h.keys["Seller"].clone();
    let fx = h
        .monitor
        .abort_with_key(&iid, "Seller.r1", "carrier withdrew", &seller)
        .unwrap();
    assert_eq!(fx.record_kinds(), ["ScopeAborted", "InstanceFaulted"]);
    assert_eq!(fx.records[0].payload["cancelledTasks"], json!(["GetIns", "GetTransp"]));
    let inst = h.monitor.instance(&iid).unwrap();
    assert_eq!(inst.tasks["GetIns"].state, TaskState::Cancelled);
    assert_eq!(inst.scopes["Seller.r1"], ScopeState::Aborted);
    assert_eq!(inst.machine_states()["Seller"], "faulted");
    assert!(inst
        .machine_states()
        .iter()
        .filter(|(m, _)| m.starts_with("Seller.r1"))
        .all(|(_, s)| s == "cancelled"));
    assert!(h.pending().is_empty());
}

#[test]
fn top_abort_aborts_instance() {
    let mut h = Harness::started(SALE);
    let iid = h.iid.clone();
    let seller = h.keys["Seller"].clone();
    h.monitor
        .abort_with_key(&iid, "Seller", "buyer cancelled", &seller)
        .unwrap();
    assert_eq!(h.monitor.instance(&iid).unwrap().status, InstanceStatus::Aborted);
    let events = h.monitor.ledger().get_events(&iid);
    let tail: Vec<&str> = events.iter().rev().take(2).rev().map(|e| e.name.as_str()).collect();
    assert_eq!(tail, ["ScopeAborted", "InstanceAborted"]);
}

#[test]
fn abort_preconditions() {
    let mut h = Harness::started(SALE);
    let iid = h.iid.clone();
    let seller = h.keys["Seller"].clone();
    assert!(matches!(
        h.monitor.abort_with_key(&iid, "Nope", "x", &seller),
        Err(EngineError::UnknownScope(_))
    ));
    assert!(matches!(
        h.monitor.abort_with_key(&iid, "Seller.r1", "x", &seller),
        Err(EngineError::ScopeNotActive(_))
    ));
    let stranger = key_from_seed("stranger");
    assert!(matches!(
        h.monitor.abort_with_key(&iid, "Seller", "x", &stranger),
        Err(EngineError::WrongActor)
    ));
    let forged = sign_hex(&seller, &abort_message(&iid, "Seller", "other reason"));
    assert!(matches!(
        h.monitor
            .abort_scope(&iid, "Seller", "x", &public_hex(&seller), &forged),
        Err(EngineError::BadSignature)
    ));
    for t in ["RecAgr", "GetTrReq", "GetIns", "GetTransp"] {
        h.complete(t);
    }
    assert!(matches!(
        h.monitor.abort_with_key(&iid, "Seller.r1", "x", &seller),
        Err(EngineError::ScopeNotActive(_))
    ));
}

#[test]
fn reattestation_bumps_version() {
    let mut h = Harness::started(SALE);
    h.complete("RecAgr");
    let iid = h.iid.clone();
    let seller = h.keys["Seller"].clone();
    let v0 = h.monitor.attestations(&iid, "SalesAgr")[0].clone();
    let cid = h.monitor.docs().put(b"amended sales agreement").unwrap();
    assert_ne!(cid, v0.cid);
    let att = bpmnchain::docstore::Attestation::new(&seller, &iid, "SalesAgr", 1, &cid);
    let stored = h
        .monitor
        .attest(&iid, "SalesAgr", &cid, &att.author, &att.signature)
        .unwrap();
    assert_eq!(stored.version, 1);
    let all = h.monitor.attestations(&iid, "SalesAgr");
    assert_eq!(all.iter().map(|a| a.version).collect::<Vec<_>>(), [0, 1]);
    assert_eq!(h.monitor.docs().get(&v0.cid).unwrap(), b"RecAgr/SalesAgr/v0");

    let unknown = bpmnchain::crypto::cid_of(b"missing");
    let att = bpmnchain::docstore::Attestation::new(&seller, &iid, "SalesAgr", 2, &unknown);
    assert!(matches!(
        h.monitor
            .attest(&iid, "SalesAgr", &unknown, &att.author, &att.signature),
        Err(EngineError::UnknownCid(_))
    ));
}

#[test]
fn collab_consumes_each_message_once() {
    let mut h = Harness::started("harvester-sale-collab.bpmn");
    let mut order = Vec::new();
    while h.monitor.instance(&h.iid).unwrap().status == InstanceStatus::Running {
        let next = h.pending().first().cloned().expect("progress while running");
        h.complete(&next);
        order.push(next);
    }
    let inst = h.monitor.instance(&h.iid).unwrap();
    assert_eq!(inst.status, InstanceStatus::Completed, "order {order:?}");
    let counts = inst.consumption_counts();
    let msgs: Vec<&&str> = counts.keys().filter(|k| k.starts_with("msg:")).collect();
    assert_eq!(msgs.len(), 11);
    for m in msgs {
        assert_eq!(counts[*m], 1, "{m}");
    }
    let pos = |t: &str| order.iter().position(|x| x == t).unwrap();
    assert!(pos("GetIns") < pos("DoTransp"));
    assert!(pos("GetTransp") < pos("DoTransp"));
    assert!(h.monitor.ledger().verify_chain());
}

#[test]
fn replay_rebuilds_identical_state() {
    let mut h = Harness::started(SALE);
    for t in ["RecAgr", "GetTrReq", "GetTransp"] {
        h.complete(t);
    }
    let txs: Vec<_> = h.monitor.ledger().txs().cloned().collect();
    let docs = h.monitor.docs().clone();
    let again = bpmnchain::engine::Monitor::replay(key_from_seed("monitor"), docs, &txs, 1).unwrap();
    assert_eq!(again.ledger().blocks(), h.monitor.ledger().blocks());
    assert_eq!(again.snapshots(), h.monitor.snapshots());
    // Tokens are reissued identically, so the old ones keep working.
    assert_eq!(
        again.pending_tasks(&h.iid).unwrap(),
        h.monitor.pending_tasks(&h.iid).unwrap()
    );
}

#[test]
fn replay_rejects_foreign_monitor_key() {
    let h = Harness::started(SALE);
    let txs: Vec<_> = h.monitor.ledger().txs().cloned().collect();
    let err =
        bpmnchain::engine::Monitor::replay(key_from_seed("other"), h.monitor.docs().clone(), &txs, 1).unwrap_err();
    assert!(matches!(err, EngineError::ReplayDiverged { index: 0, .. }));
}

#[test]
fn tokens_are_per_task_and_per_monitor_key() {
    let a = Harness::started("harvester-sale-collab.bpmn");
    let b = Harness::started("harvester-sale-collab.bpmn");
    let tokens = |h: &Harness| -> Vec<String> {
        h.monitor
            .pending_tasks(&h.iid)
            .unwrap()
            .into_iter()
            .map(|t| t.callback_token)
            .collect()
    };
    assert_eq!(tokens(&a), tokens(&b));
    let mine = tokens(&a);
    let distinct: std::collections::BTreeSet<_> = mine.iter().collect();
    assert_eq!(distinct.len(), mine.len());
    assert!(mine.iter().all(|t| t.len() == 64));

    let program = compile(&fixture("harvester-sale-collab.bpmn")).unwrap().program;
    let mut other = Monitor::new(
        key_from_seed("another monitor"),
        Ledger::in_memory(1),
        Arc::new(DocStore::in_memory()),
    );
    let pid = other.deploy_with_key(program, &key_from_seed("deployer")).unwrap();
    let bindings = a.monitor.instance(&a.iid).unwrap().actor_bindings.clone();
    let iid = other
        .create_with_key(&pid, bindings, &key_from_seed("creator"))
        .unwrap();
    other.run_until_quiescent(&iid).unwrap();
    let theirs: Vec<String> = other
        .pending_tasks(&iid)
        .unwrap()
        .into_iter()
        .map(|t| t.callback_token)
        .collect();
    assert_eq!(theirs.len(), mine.len());
    assert!(theirs.iter().all(|t| !mine.contains(t)));
}
