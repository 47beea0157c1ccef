//! BPMN 2.0 XML reader and writer for the supported subset.
//!
//! Anything outside the subset is rejected with the offending element's
//! name. BPMN DI (diagram interchange) content is skipped.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use roxmltree::{Document, Node};
use thiserror::Error;

use super::guard::{parse_guard, GuardError};
use super::{BpmnModel, DataObject, FlowNode, Lane, MessageFlow, NodeKind, Pool, SequenceFlow};

pub const BPMN_NS: &str = "http://www.omg.org/spec/BPMN/20100524/MODEL";
const BPMNDI_NS: &str = "http://www.omg.org/spec/BPMN/20100524/DI";
const XSI_NS: &str = "http://www.w3.org/2001/XMLSchema-instance";
/// Namespace for the two attributes BPMN has no slot for: the data object a
/// message flow carries, and a data object's schema hint.
pub const EXT_NS: &str = "urn:bpmnchain:ext";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("input is not valid UTF-8")]
    NotUtf8,
    #[error("XML syntax error: {0}")]
    XmlSyntax(String),
    #[error("unsupported element <{element}> in {context}")]
    UnsupportedElement { element: String, context: String },
    #[error("dangling reference {reference:?} in {context}")]
    DanglingReference { reference: String, context: String },
    #[error("<{element}> is missing attribute {attribute:?}")]
    MissingAttribute { element: String, attribute: String },
    #[error("guard on sequence flow {flow}: {error}")]
    Guard { flow: String, error: GuardError },
}

fn unsupported(node: Node, context: &str) -> ParseError {
    let element = match node.tag_name().namespace() {
        Some(ns) if ns != BPMN_NS => format!("{{{ns}}}{}", node.tag_name().name()),
        _ => node.tag_name().name().to_string(),
    };
    ParseError::UnsupportedElement {
        element,
        context: context.to_string(),
    }
}

fn dangling(reference: &str, context: impl Into<String>) -> ParseError {
    ParseError::DanglingReference {
        reference: reference.to_string(),
        context: context.into(),
    }
}

fn is_bpmn(node: Node, name: &str) -> bool {
    node.is_element() && node.tag_name().namespace() == Some(BPMN_NS) && node.tag_name().name() == name
}

fn attr<'a>(node: Node<'a, '_>, name: &str) -> Result<&'a str, ParseError> {
    node.attribute(name).ok_or_else(|| ParseError::MissingAttribute {
        element: node.tag_name().name().to_string(),
        attribute: name.to_string(),
    })
}

fn elements<'a, 'i>(node: Node<'a, 'i>) -> impl Iterator<Item = Node<'a, 'i>> {
    node.children().filter(|c| c.is_element())
}

fn text_of(node: Node) -> String {
    node.children()
        .filter(|c| c.is_text())
        .filter_map(|c| c.text())
        .collect::<String>()
        .trim()
        .to_string()
}

struct RawNode {
    node: FlowNode,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

struct RawFlow {
    flow: SequenceFlow,
}

struct RawProcess {
    id: String,
    name: String,
    lanes: Option<Vec<(String, String, Vec<String>)>>,
    nodes: Vec<RawNode>,
    flows: Vec<RawFlow>,
    defaults: Vec<(String, String)>,
}

fn parse_flow_node(el: Node, kind: NodeKind) -> Result<RawNode, ParseError> {
    let id = attr(el, "id")?.to_string();
    let context = format!("{} {id}", el.tag_name().name());
    let mut documentation = Vec::new();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut has_message_def = false;
    for child in elements(el) {
        let name = child.tag_name().name();
        if child.tag_name().namespace() != Some(BPMN_NS) {
            return Err(unsupported(child, &context));
        }
        match name {
            "documentation" => documentation.push(text_of(child)),
            "incoming" | "outgoing" => {}
            "dataInputAssociation" if kind == NodeKind::Task => {
                let source =
                    elements(child)
                        .find(|c| is_bpmn(*c, "sourceRef"))
                        .ok_or_else(|| ParseError::MissingAttribute {
                            element: "dataInputAssociation".into(),
                            attribute: "sourceRef".into(),
                        })?;
                for c in elements(child) {
                    if !(is_bpmn(c, "sourceRef") || is_bpmn(c, "targetRef")) {
                        return Err(unsupported(c, &context));
                    }
                }
                inputs.push(text_of(source));
            }
            "dataOutputAssociation" if kind == NodeKind::Task => {
                let target =
                    elements(child)
                        .find(|c| is_bpmn(*c, "targetRef"))
                        .ok_or_else(|| ParseError::MissingAttribute {
                            element: "dataOutputAssociation".into(),
                            attribute: "targetRef".into(),
                        })?;
                for c in elements(child) {
                    if !(is_bpmn(c, "sourceRef") || is_bpmn(c, "targetRef")) {
                        return Err(unsupported(c, &context));
                    }
                }
                outputs.push(text_of(target));
            }
            // Modelers emit a placeholder property as the target of input
            // associations; it carries no semantics.
            "property" if kind == NodeKind::Task => {}
            "messageEventDefinition" if matches!(kind, NodeKind::MessageCatch | NodeKind::MessageThrow) => {
                has_message_def = true;
            }
            _ => return Err(unsupported(child, &context)),
        }
    }
    if matches!(kind, NodeKind::MessageCatch | NodeKind::MessageThrow) && !has_message_def {
        return Err(ParseError::UnsupportedElement {
            element: el.tag_name().name().to_string(),
            context: format!("{context} (only message intermediate events are supported)"),
        });
    }
    Ok(RawNode {
        node: FlowNode {
            id,
            kind,
            name: el.attribute("name").unwrap_or_default().to_string(),
            documentation: documentation.join("\n"),
            data_inputs: Vec::new(),
            data_outputs: Vec::new(),
        },
        inputs,
        outputs,
    })
}

fn parse_process(
    el: Node,
    data_objects: &mut Vec<DataObject>,
    data_refs: &mut HashMap<String, String>,
) -> Result<RawProcess, ParseError> {
    let id = attr(el, "id")?.to_string();
    let context = format!("process {id}");
    let mut process = RawProcess {
        name: el.attribute("name").unwrap_or_default().to_string(),
        id,
        lanes: None,
        nodes: Vec::new(),
        flows: Vec::new(),
        defaults: Vec::new(),
    };
    for child in elements(el) {
        if child.tag_name().namespace() != Some(BPMN_NS) {
            return Err(unsupported(child, &context));
        }
        let kind = match child.tag_name().name() {
            "startEvent" => Some(NodeKind::StartEvent),
            "endEvent" => Some(NodeKind::EndEvent),
            "task" => Some(NodeKind::Task),
            "parallelGateway" => Some(NodeKind::ParallelGateway),
            "exclusiveGateway" => Some(NodeKind::ExclusiveGateway),
            "intermediateCatchEvent" => Some(NodeKind::MessageCatch),
            "intermediateThrowEvent" => Some(NodeKind::MessageThrow),
            _ => None,
        };
        if let Some(kind) = kind {
            let raw = parse_flow_node(child, kind)?;
            if kind == NodeKind::ExclusiveGateway {
                if let Some(default) = child.attribute("default") {
                    process.defaults.push((raw.node.id.clone(), default.to_string()));
                }
            }
            process.nodes.push(raw);
            continue;
        }
        match child.tag_name().name() {
            "documentation" => {}
            "laneSet" => {
                if process.lanes.is_some() {
                    return Err(unsupported(child, &format!("{context} (second laneSet)")));
                }
                let mut lanes = Vec::new();
                for lane in elements(child) {
                    if !is_bpmn(lane, "lane") {
                        return Err(unsupported(lane, &context));
                    }
                    let lane_id = attr(lane, "id")?.to_string();
                    let mut refs = Vec::new();
                    for r in elements(lane) {
                        if is_bpmn(r, "flowNodeRef") {
                            refs.push(text_of(r));
                        } else if !is_bpmn(r, "documentation") {
                            return Err(unsupported(r, &format!("lane {lane_id}")));
                        }
                    }
                    let name = lane.attribute("name").unwrap_or_default().to_string();
                    lanes.push((lane_id, name, refs));
                }
                process.lanes = Some(lanes);
            }
            "sequenceFlow" => {
                let flow_id = attr(child, "id")?.to_string();
                let mut guard = None;
                for c in elements(child) {
                    if is_bpmn(c, "conditionExpression") {
                        let text = text_of(c);
                        guard = Some(parse_guard(&text).map_err(|error| ParseError::Guard {
                            flow: flow_id.clone(),
                            error,
                        })?);
                    } else if !is_bpmn(c, "documentation") {
                        return Err(unsupported(c, &format!("sequenceFlow {flow_id}")));
                    }
                }
                process.flows.push(RawFlow {
                    flow: SequenceFlow {
                        source: attr(child, "sourceRef")?.to_string(),
                        target: attr(child, "targetRef")?.to_string(),
                        id: flow_id,
                        guard,
                        is_default: false,
                    },
                });
            }
            "dataObject" => {
                let id = attr(child, "id")?.to_string();
                if let Some(c) = elements(child).find(|c| !is_bpmn(*c, "documentation")) {
                    return Err(unsupported(c, &format!("dataObject {id}")));
                }
                data_refs.insert(id.clone(), id.clone());
                data_objects.push(DataObject {
                    name: child.attribute("name").unwrap_or(&id).to_string(),
                    schema_hint: child.attribute((EXT_NS, "schema")).map(str::to_string),
                    id,
                });
            }
            "dataObjectReference" => {
                let id = attr(child, "id")?.to_string();
                let target = attr(child, "dataObjectRef")?.to_string();
                if let Some(c) = elements(child).find(|c| !is_bpmn(*c, "documentation")) {
                    return Err(unsupported(c, &format!("dataObjectReference {id}")));
                }
                data_refs.insert(id, target);
            }
            _ => return Err(unsupported(child, &context)),
        }
    }
    Ok(process)
}

/// Parse BPMN 2.0 XML (UTF-8) into a [`BpmnModel`].
pub fn parse_bpmn(xml: &[u8]) -> Result<BpmnModel, ParseError> {
    let text = std::str::from_utf8(xml).map_err(|_| ParseError::NotUtf8)?;
    let doc = Document::parse(text).map_err(|e| ParseError::XmlSyntax(e.to_string()))?;
    let root = doc.root_element();
    if !is_bpmn(root, "definitions") {
        return Err(unsupported(root, "document root"));
    }

    let mut participants = Vec::new();
    let mut raw_message_flows = Vec::new();
    let mut processes = Vec::new();
    let mut data_objects = Vec::new();
    let mut data_refs = HashMap::new();

    for child in elements(root) {
        match child.tag_name().namespace() {
            Some(BPMNDI_NS) => continue,
            Some(BPMN_NS) => {}
            _ => return Err(unsupported(child, "definitions")),
        }
        match child.tag_name().name() {
            "documentation" => {}
            "collaboration" => {
                for c in elements(child) {
                    if is_bpmn(c, "participant") {
                        let id = attr(c, "id")?.to_string();
                        let process_ref = c
                            .attribute("processRef")
                            .ok_or_else(|| ParseError::UnsupportedElement {
                                element: "participant".into(),
                                context: format!("participant {id} has no processRef"),
                            })?;
                        participants.push((
                            id,
                            c.attribute("name").unwrap_or_default().to_string(),
                            process_ref.to_string(),
                        ));
                    } else if is_bpmn(c, "messageFlow") {
                        raw_message_flows.push((
                            attr(c, "id")?.to_string(),
                            attr(c, "sourceRef")?.to_string(),
                            attr(c, "targetRef")?.to_string(),
                            c.attribute((EXT_NS, "carries")).map(str::to_string),
                        ));
                    } else if !is_bpmn(c, "documentation") {
                        return Err(unsupported(c, "collaboration"));
                    }
                }
            }
            "process" => processes.push(parse_process(child, &mut data_objects, &mut data_refs)?),
            _ => return Err(unsupported(child, "definitions")),
        }
    }

    let resolve_data = |reference: &str, context: &str| -> Result<String, ParseError> {
        data_refs
            .get(reference)
            .filter(|target| data_objects.iter().any(|d| &d.id == *target))
            .cloned()
            .ok_or_else(|| dangling(reference, context.to_string()))
    };

    let mut by_process: BTreeMap<String, RawProcess> = BTreeMap::new();
    let mut process_order = Vec::new();
    for p in processes {
        process_order.push(p.id.clone());
        by_process.insert(p.id.clone(), p);
    }
    let mut pool_specs = Vec::new();
    for (id, name, process_ref) in &participants {
        if !by_process.contains_key(process_ref) {
            return Err(dangling(process_ref, format!("participant {id}")));
        }
        pool_specs.push((id.clone(), name.clone(), process_ref.clone()));
    }
    for pid in &process_order {
        if !participants.iter().any(|(_, _, r)| r == pid) {
            let name = &by_process[pid].name;
            let name = if name.is_empty() { pid.clone() } else { name.clone() };
            pool_specs.push((pid.clone(), name, pid.clone()));
        }
    }

    let mut pools = Vec::new();
    for (pool_id, pool_name, process_id) in pool_specs {
        let raw = by_process
            .remove(&process_id)
            .ok_or_else(|| dangling(&process_id, format!("participant {pool_id} (process already used)")))?;
        let mut nodes = Vec::new();
        for r in raw.nodes {
            let mut node = r.node;
            let ctx = format!("data association of {}", node.id);
            node.data_inputs = r
                .inputs
                .iter()
                .map(|i| resolve_data(i, &ctx))
                .collect::<Result<_, _>>()?;
            node.data_outputs = r
                .outputs
                .iter()
                .map(|o| resolve_data(o, &ctx))
                .collect::<Result<_, _>>()?;
            nodes.push(node);
        }
        let mut flows: Vec<SequenceFlow> = raw.flows.into_iter().map(|f| f.flow).collect();
        for (gateway, flow_id) in &raw.defaults {
            let flow = flows
                .iter_mut()
                .find(|f| &f.id == flow_id)
                .ok_or_else(|| dangling(flow_id, format!("default of exclusiveGateway {gateway}")))?;
            flow.is_default = true;
        }
        for f in &flows {
            for end in [&f.source, &f.target] {
                if !nodes.iter().any(|n| &n.id == end) {
                    return Err(dangling(end, format!("sequenceFlow {} in process {process_id}", f.id)));
                }
            }
        }

        let lanes = match raw.lanes {
            None => vec![Lane {
                id: process_id.clone(),
                name: pool_name.clone(),
                nodes,
                flows,
            }],
            Some(specs) => {
                let mut lane_of: HashMap<String, usize> = HashMap::new();
                for (i, (lane_id, _, refs)) in specs.iter().enumerate() {
                    for r in refs {
                        if !nodes.iter().any(|n| &n.id == r) {
                            return Err(dangling(r, format!("flowNodeRef of lane {lane_id}")));
                        }
                        lane_of.insert(r.clone(), i);
                    }
                }
                let mut lanes: Vec<Lane> = specs
                    .into_iter()
                    .map(|(id, name, _)| Lane {
                        id,
                        name,
                        nodes: Vec::new(),
                        flows: Vec::new(),
                    })
                    .collect();
                for node in nodes {
                    let i = *lane_of.get(&node.id).ok_or_else(|| {
                        dangling(&node.id, format!("node not assigned to a lane of process {process_id}"))
                    })?;
                    lanes[i].nodes.push(node);
                }
                for flow in flows {
                    let i = lane_of[&flow.source];
                    lanes[i].flows.push(flow);
                }
                lanes
            }
        };
        pools.push(Pool {
            id: pool_id,
            name: pool_name,
            process_id,
            lanes,
        });
    }

    let mut model = BpmnModel {
        pools,
        message_flows: Vec::new(),
        data_objects: Vec::new(),
    };
    for (id, source, target, carries) in raw_message_flows {
        for end in [&source, &target] {
            if model.node(end).is_none() {
                return Err(dangling(end, format!("messageFlow {id}")));
            }
        }
        let carries = carries
            .map(|c| resolve_data(&c, &format!("carries of messageFlow {id}")))
            .transpose()?;
        model.message_flows.push(MessageFlow {
            id,
            source_node: source,
            target_node: target,
            carries,
        });
    }
    model.data_objects = data_objects;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Writer

fn esc(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn tag_of(kind: NodeKind) -> &'static str {
    match kind {
        NodeKind::StartEvent => "startEvent",
        NodeKind::EndEvent => "endEvent",
        NodeKind::Task => "task",
        NodeKind::ParallelGateway => "parallelGateway",
        NodeKind::ExclusiveGateway => "exclusiveGateway",
        NodeKind::MessageCatch => "intermediateCatchEvent",
        NodeKind::MessageThrow => "intermediateThrowEvent",
    }
}

fn write_node(out: &mut String, node: &FlowNode, lane: &Lane) {
    let tag = tag_of(node.kind);
    let _ = write!(
        out,
        "    <bpmn:{tag} id=\"{}\" name=\"{}\"",
        esc(&node.id),
        esc(&node.name)
    );
    if node.kind == NodeKind::ExclusiveGateway {
        if let Some(d) = lane.flows.iter().find(|f| f.source == node.id && f.is_default) {
            let _ = write!(out, " default=\"{}\"", esc(&d.id));
        }
    }
    out.push_str(">\n");
    if !node.documentation.is_empty() {
        let _ = writeln!(
            out,
            "      <bpmn:documentation>{}</bpmn:documentation>",
            esc(&node.documentation)
        );
    }
    for (i, input) in node.data_inputs.iter().enumerate() {
        let _ = writeln!(
            out,
            "      <bpmn:dataInputAssociation id=\"{}_in{i}\"><bpmn:sourceRef>{}</bpmn:sourceRef></bpmn:dataInputAssociation>",
            esc(&node.id),
            esc(input)
        );
    }
    for (i, output) in node.data_outputs.iter().enumerate() {
        let _ = writeln!(
            out,
            "      <bpmn:dataOutputAssociation id=\"{}_out{i}\"><bpmn:targetRef>{}</bpmn:targetRef></bpmn:dataOutputAssociation>",
            esc(&node.id),
            esc(output)
        );
    }
    if matches!(node.kind, NodeKind::MessageCatch | NodeKind::MessageThrow) {
        out.push_str("      <bpmn:messageEventDefinition/>\n");
    }
    let _ = writeln!(out, "    </bpmn:{tag}>");
}

/// Serialize a model back to BPMN XML. `parse_bpmn(to_bpmn_xml(m)) == m`
/// for every model produced by [`parse_bpmn`].
pub fn to_bpmn_xml(model: &BpmnModel) -> String {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<bpmn:definitions xmlns:bpmn=\"{BPMN_NS}\" xmlns:xsi=\"{XSI_NS}\" xmlns:bc=\"{EXT_NS}\" id=\"Definitions\" targetNamespace=\"urn:bpmnchain\">"
    );
    let collaboration = !model.message_flows.is_empty() || model.pools.iter().any(|p| p.id != p.process_id);
    if collaboration {
        out.push_str("  <bpmn:collaboration id=\"Collaboration\">\n");
        for pool in &model.pools {
            let _ = writeln!(
                out,
                "    <bpmn:participant id=\"{}\" name=\"{}\" processRef=\"{}\"/>",
                esc(&pool.id),
                esc(&pool.name),
                esc(&pool.process_id)
            );
        }
        for mf in &model.message_flows {
            let _ = write!(
                out,
                "    <bpmn:messageFlow id=\"{}\" sourceRef=\"{}\" targetRef=\"{}\"",
                esc(&mf.id),
                esc(&mf.source_node),
                esc(&mf.target_node)
            );
            if let Some(c) = &mf.carries {
                let _ = write!(out, " bc:carries=\"{}\"", esc(c));
            }
            out.push_str("/>\n");
        }
        out.push_str("  </bpmn:collaboration>\n");
    }
    for (pi, pool) in model.pools.iter().enumerate() {
        let _ = writeln!(
            out,
            "  <bpmn:process id=\"{}\" name=\"{}\" isExecutable=\"false\">",
            esc(&pool.process_id),
            esc(&pool.name)
        );
        let implicit = pool.lanes.len() == 1 && pool.lanes[0].id == pool.process_id;
        if !implicit {
            let _ = writeln!(out, "    <bpmn:laneSet id=\"{}_lanes\">", esc(&pool.process_id));
            for lane in &pool.lanes {
                let _ = writeln!(
                    out,
                    "      <bpmn:lane id=\"{}\" name=\"{}\">",
                    esc(&lane.id),
                    esc(&lane.name)
                );
                for n in &lane.nodes {
                    let _ = writeln!(out, "        <bpmn:flowNodeRef>{}</bpmn:flowNodeRef>", esc(&n.id));
                }
                out.push_str("      </bpmn:lane>\n");
            }
            out.push_str("    </bpmn:laneSet>\n");
        }
        if pi == 0 {
            for d in &model.data_objects {
                let _ = write!(
                    out,
                    "    <bpmn:dataObject id=\"{}\" name=\"{}\"",
                    esc(&d.id),
                    esc(&d.name)
                );
                if let Some(s) = &d.schema_hint {
                    let _ = write!(out, " bc:schema=\"{}\"", esc(s));
                }
                out.push_str("/>\n");
            }
        }
        for lane in &pool.lanes {
            for node in &lane.nodes {
                write_node(&mut out, node, lane);
            }
        }
        for lane in &pool.lanes {
            for f in &lane.flows {
                let _ = write!(
                    out,
                    "    <bpmn:sequenceFlow id=\"{}\" sourceRef=\"{}\" targetRef=\"{}\"",
                    esc(&f.id),
                    esc(&f.source),
                    esc(&f.target)
                );
                match &f.guard {
                    Some(g) => {
                        let _ = writeln!(
                            out,
                            ">\n      <bpmn:conditionExpression xsi:type=\"bpmn:tFormalExpression\">{}</bpmn:conditionExpression>\n    </bpmn:sequenceFlow>",
                            esc(&g.to_string())
                        );
                    }
                    None => out.push_str("/>\n"),
                }
            }
        }
        out.push_str("  </bpmn:process>\n");
    }
    out.push_str("</bpmn:definitions>\n");
    out
}
