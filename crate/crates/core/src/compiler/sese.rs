//! Canonical single-entry single-exit regions of a lane graph.
//!
//! Dominance is computed on the edge-expanded graph (every sequence flow
//! becomes a node between its endpoints) with a virtual exit joined to every
//! sink, so that multiple end events are handled uniformly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpmn::{FlowGraph, LaneGraph, NodeKind};
use crate::digraph::{dominates, Digraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Region {
    pub id: String,
    pub entry_edge: Option<String>,
    pub exit_edge: Option<String>,
    /// Every flow node inside the region, gateways included, in lane order.
    pub nodes: Vec<String>,
    pub children: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegionTree {
    pub lane: String,
    pub root: Region,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegionError {
    #[error("irreducible flow in lane {lane} at {node}: {reason}")]
    Irreducible { lane: String, node: String, reason: String },
}

impl Region {
    /// Preorder walk.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Region, usize)) {
        fn go<'a>(r: &'a Region, depth: usize, f: &mut impl FnMut(&'a Region, usize)) {
            f(r, depth);
            for c in &r.children {
                go(c, depth + 1, f);
            }
        }
        go(self, 0, f);
    }

    pub fn find(&self, id: &str) -> Option<&Region> {
        let mut hit = None;
        self.walk(&mut |r, _| {
            if r.id == id {
                hit = Some(r);
            }
        });
        hit
    }

    pub fn contains(&self, node: &str) -> bool {
        self.nodes.iter().any(|n| n == node)
    }
}

impl RegionTree {
    /// Non-root regions in preorder.
    pub fn regions(&self) -> Vec<&Region> {
        let mut out = Vec::new();
        self.root.walk(&mut |r, depth| {
            if depth > 0 {
                out.push(r);
            }
        });
        out
    }

    pub fn by_entry(&self, edge: &str) -> Option<&Region> {
        self.regions()
            .into_iter()
            .find(|r| r.entry_edge.as_deref() == Some(edge))
    }
}

/// Edge-expanded graph with dominator trees.
struct Expanded {
    n: usize,
    idom: Vec<Option<usize>>,
    ipdom: Vec<Option<usize>>,
}

impl Expanded {
    fn new(lane: &LaneGraph) -> Option<Self> {
        let n = lane.nodes.len();
        let m = lane.edges.len();
        let exit = n + m;
        let mut g = Digraph::new(n + m + 1);
        let mut outdeg = vec![0usize; n];
        for (k, e) in lane.edges.iter().enumerate() {
            let s = lane.node_index(&e.source)?;
            let t = lane.node_index(&e.target)?;
            g.add_edge(s, n + k);
            g.add_edge(n + k, t);
            outdeg[s] += 1;
        }
        for (i, d) in outdeg.iter().enumerate() {
            if *d == 0 {
                g.add_edge(i, exit);
            }
        }
        let start = lane.start()?;
        Some(Expanded {
            n,
            idom: g.idoms(start),
            ipdom: g.reversed().idoms(exit),
        })
    }

    fn edge(&self, k: usize) -> usize {
        self.n + k
    }

    fn sese(&self, a: usize, b: usize) -> bool {
        a != b
            && dominates(&self.idom, self.edge(a), self.edge(b))
            && dominates(&self.ipdom, self.edge(b), self.edge(a))
    }

    fn inside(&self, a: usize, b: usize) -> Vec<usize> {
        (0..self.n)
            .filter(|&v| dominates(&self.idom, self.edge(a), v) && dominates(&self.ipdom, self.edge(b), v))
            .collect()
    }
}

/// Canonical SESE regions of one lane that contain at least one gateway, as
/// `(entry edge index, exit edge index, node indices)`, sorted by entry.
pub fn canonical_regions(lane: &LaneGraph) -> Vec<(usize, usize, Vec<usize>)> {
    let Some(x) = Expanded::new(lane) else {
        return Vec::new();
    };
    let m = lane.edges.len();
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| (0..m).map(move |b| (a, b)))
        .filter(|&(a, b)| x.sese(a, b))
        .collect();
    let mut exits: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut entries: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(a, b) in &pairs {
        exits.entry(a).or_default().push(b);
        entries.entry(b).or_default().push(a);
    }
    let nearest_exit = |a: usize, b: usize| exits[&a].iter().all(|&o| dominates(&x.ipdom, x.edge(o), x.edge(b)));
    let nearest_entry = |a: usize, b: usize| entries[&b].iter().all(|&o| dominates(&x.idom, x.edge(o), x.edge(a)));
    pairs
        .iter()
        .filter(|&&(a, b)| nearest_exit(a, b) && nearest_entry(a, b))
        .map(|&(a, b)| (a, b, x.inside(a, b)))
        .filter(|(_, _, nodes)| nodes.iter().any(|&v| lane.nodes[v].kind.is_gateway()))
        .collect()
}

/// Program structure tree for every lane.
pub fn detect_regions(g: &FlowGraph) -> Result<BTreeMap<String, RegionTree>, RegionError> {
    g.lanes
        .iter()
        .map(|(id, lane)| Ok((id.clone(), lane_regions(lane)?)))
        .collect()
}

fn lane_regions(lane: &LaneGraph) -> Result<RegionTree, RegionError> {
    let found = canonical_regions(lane);
    check_parallel_blocks(lane, &found)?;

    // Parent = smallest strictly larger region containing all nodes.
    let sets: Vec<BTreeSet<usize>> = found.iter().map(|(_, _, v)| v.iter().copied().collect()).collect();
    let parent: Vec<Option<usize>> = (0..found.len())
        .map(|i| {
            (0..found.len())
                .filter(|&j| j != i && sets[j].len() > sets[i].len() && sets[i].is_subset(&sets[j]))
                .min_by_key(|&j| sets[j].len())
        })
        .collect();

    let mut counter = 0;
    let start_edge = lane
        .start()
        .and_then(|s| lane.outgoing(&lane.nodes[s].id).next())
        .map(|(_, e)| e.id.clone());
    let ends: Vec<_> = lane
        .edges
        .iter()
        .filter(|e| lane.kind(&e.target) == Some(NodeKind::EndEvent))
        .collect();
    let root = Region {
        id: lane.lane_id.clone(),
        entry_edge: start_edge,
        exit_edge: if ends.len() == 1 {
            Some(ends[0].id.clone())
        } else {
            None
        },
        nodes: lane.nodes.iter().map(|n| n.id.clone()).collect(),
        children: build_children(lane, &found, &parent, None, &mut counter),
    };
    Ok(RegionTree {
        lane: lane.lane_id.clone(),
        root,
    })
}

fn build_children(
    lane: &LaneGraph,
    found: &[(usize, usize, Vec<usize>)],
    parent: &[Option<usize>],
    of: Option<usize>,
    counter: &mut usize,
) -> Vec<Region> {
    // `found` is sorted by entry edge index, so children come out in that order.
    let mut out = Vec::new();
    for (i, (a, b, nodes)) in found.iter().enumerate() {
        if parent[i] != of {
            continue;
        }
        *counter += 1;
        let id = format!("{}.r{}", lane.lane_id, counter);
        let children = build_children(lane, found, parent, Some(i), counter);
        out.push(Region {
            id,
            entry_edge: Some(lane.edges[*a].id.clone()),
            exit_edge: Some(lane.edges[*b].id.clone()),
            nodes: nodes.iter().map(|&v| lane.nodes[v].id.clone()).collect(),
            children,
        });
    }
    out
}

/// Every parallel split must open a canonical region that its matching join
/// closes, and the branches between them must not share nodes.
fn check_parallel_blocks(lane: &LaneGraph, found: &[(usize, usize, Vec<usize>)]) -> Result<(), RegionError> {
    let g = lane.digraph();
    let irreducible = |node: &str, reason: &str| RegionError::Irreducible {
        lane: lane.lane_id.clone(),
        node: node.to_string(),
        reason: reason.to_string(),
    };
    for (i, node) in lane.nodes.iter().enumerate() {
        if node.kind != NodeKind::ParallelGateway || g.succ[i].len() < 2 {
            continue;
        }
        let Some((into, _)) = lane.incoming(&node.id).next() else {
            return Err(irreducible(&node.id, "parallel split has no incoming flow"));
        };
        let Some((_, exit, nodes)) = found.iter().find(|(a, _, _)| *a == into) else {
            return Err(irreducible(
                &node.id,
                "parallel split does not open a single-entry single-exit region",
            ));
        };
        let join = lane.node_index(&lane.edges[*exit].source).unwrap_or(usize::MAX);
        if join == usize::MAX || lane.nodes[join].kind != NodeKind::ParallelGateway || g.pred[join].len() < 2 {
            return Err(irreducible(
                &node.id,
                "region opened by the parallel split is not closed by a parallel join",
            ));
        }
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for (_, e) in lane.outgoing(&node.id) {
            let branch = branch_nodes(lane, &g, &e.target, join);
            if branch.iter().any(|v| !nodes.contains(v)) {
                return Err(irreducible(&node.id, "parallel branch leaves its region"));
            }
            if branch.iter().any(|v| seen.contains(v)) {
                return Err(irreducible(&node.id, "parallel branches share flow nodes"));
            }
            seen.extend(branch);
        }
    }
    Ok(())
}

fn branch_nodes(lane: &LaneGraph, g: &Digraph, first: &str, join: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let Some(start) = lane.node_index(first) else {
        return out;
    };
    let mut stack = vec![start];
    while let Some(v) = stack.pop() {
        if v == join || !out.insert(v) {
            continue;
        }
        stack.extend(g.succ[v].iter().copied());
    }
    out
}
