//! Compile BPMN collaboration models into networks of discrete-event state
//! machines and execute them on a simulated, hash-chained ledger, with
//! every exchanged document certified by a signed content identifier.

pub mod bpmn;
pub mod canonical;
pub mod compiler;
pub mod crypto;
pub mod digraph;
pub mod docstore;
pub mod engine;
pub mod ledger;
