//! BPMN to monitor program compilation: regions, hierarchical machine,
//! transaction scopes, FSM network, program emission.

pub mod flatten;
pub mod hsm;
pub mod program;
pub mod scopes;
pub mod sese;

pub use flatten::{flatten_hsm, Action, Channel, DeFsm, FsmNetwork, FsmTransition, Trigger};
pub use hsm::{build_hsm, DeHsm, HsmState, Sequence, Vertex};
pub use program::{dataflow_of, emit_program, MonitorProgram, TaskFlow};
pub use scopes::{identify_scopes, ScopeKind, TransactionScope};
pub use sese::{canonical_regions, detect_regions, Region, RegionError, RegionTree};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::bpmn::{self, BpmnModel, Diagnostic, FlowGraph, ParseError};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("model is invalid:\n{}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Diagnostic>),
    #[error(transparent)]
    Irreducible(#[from] RegionError),
    #[error("malformed monitor program: {0}")]
    BadProgram(String),
    #[error("internal compiler error: {0}")]
    Internal(String),
}

/// Every intermediate artifact of a compilation.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub model: BpmnModel,
    pub graph: FlowGraph,
    pub regions: BTreeMap<String, RegionTree>,
    pub hsm: DeHsm,
    pub scopes: Vec<TransactionScope>,
    pub program: MonitorProgram,
}

pub fn compile_model(model: BpmnModel) -> Result<Compiled, CompileError> {
    let diagnostics = bpmn::validate_model(&model);
    if !diagnostics.is_empty() {
        return Err(CompileError::Invalid(diagnostics));
    }
    let graph = bpmn::to_flow_graph(&model);
    let regions = detect_regions(&graph)?;
    let hsm = build_hsm(&graph, &regions)?;
    let scopes = identify_scopes(&regions, &model);
    let network = flatten_hsm(&hsm, &scopes);
    let actors = graph.lanes.keys().cloned().collect();
    let program = emit_program(network, scopes.clone(), dataflow_of(&model)?, actors);
    Ok(Compiled {
        model,
        graph,
        regions,
        hsm,
        scopes,
        program,
    })
}

/// Parse, validate and compile a BPMN XML document.
pub fn compile(xml: &[u8]) -> Result<Compiled, CompileError> {
    compile_model(bpmn::parse_bpmn(xml)?)
}
