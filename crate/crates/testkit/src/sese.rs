//! Single-entry single-exit regions by brute force over every complete path
//! of an acyclic lane, with no dominator computation.

use std::collections::BTreeSet;

use bpmnchain::bpmn::LaneGraph;

/// Region as `(entry flow id, exit flow id, node ids)`.
pub type RegionKey = (String, String, BTreeSet<String>);

/// A path alternates node and edge positions: `Node(i)` or `Edge(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Item {
    Node(usize),
    Edge(usize),
}

fn paths(lane: &LaneGraph) -> Vec<Vec<Item>> {
    let start = lane.start().expect("lane has a start event");
    let mut out = Vec::new();
    let mut stack = vec![vec![Item::Node(start)]];
    while let Some(p) = stack.pop() {
        let Some(&Item::Node(v)) = p.last() else { unreachable!() };
        let outs: Vec<(usize, usize)> = lane
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.source == lane.nodes[v].id)
            .map(|(k, e)| (k, lane.node_index(&e.target).expect("edge target")))
            .collect();
        if outs.is_empty() {
            out.push(p);
            continue;
        }
        for (k, t) in outs {
            let mut q = p.clone();
            q.push(Item::Edge(k));
            q.push(Item::Node(t));
            stack.push(q);
        }
    }
    out
}

struct Paths {
    all: Vec<Vec<Item>>,
}

impl Paths {
    /// Every path through `y` passes `x` before it.
    fn before(&self, x: Item, y: Item) -> bool {
        self.all.iter().all(|p| match p.iter().position(|&i| i == y) {
            None => true,
            Some(py) => p[..=py].contains(&x),
        })
    }

    /// Every path through `y` passes `x` after it.
    fn after(&self, x: Item, y: Item) -> bool {
        self.all.iter().all(|p| match p.iter().position(|&i| i == y) {
            None => true,
            Some(py) => p[py..].contains(&x),
        })
    }
}

/// Canonical regions that contain at least one gateway: for entry `a` and
/// exit `b`, every path through `b` passes `a` first and every path through
/// `a` reaches `b`; `b` is the nearest such exit of `a` and `a` the nearest
/// entry of `b`. The nodes are those every path brackets between them.
pub fn brute_force_regions(lane: &LaneGraph) -> BTreeSet<RegionKey> {
    let p = Paths { all: paths(lane) };
    let m = lane.edges.len();
    let sese =
        |a: usize, b: usize| a != b && p.before(Item::Edge(a), Item::Edge(b)) && p.after(Item::Edge(b), Item::Edge(a));
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| (0..m).map(move |b| (a, b)))
        .filter(|&(a, b)| sese(a, b))
        .collect();
    let mut out = BTreeSet::new();
    for &(a, b) in &pairs {
        let nearest_exit = pairs
            .iter()
            .filter(|&&(x, _)| x == a)
            .all(|&(_, o)| p.after(Item::Edge(o), Item::Edge(b)));
        let nearest_entry = pairs
            .iter()
            .filter(|&&(_, y)| y == b)
            .all(|&(o, _)| p.before(Item::Edge(o), Item::Edge(a)));
        if !(nearest_exit && nearest_entry) {
            continue;
        }
        let nodes: BTreeSet<usize> = (0..lane.nodes.len())
            .filter(|&v| {
                // Only nodes some path actually visits between the two.
                p.all.iter().any(|q| q.contains(&Item::Node(v)))
                    && p.before(Item::Edge(a), Item::Node(v))
                    && p.after(Item::Edge(b), Item::Node(v))
            })
            .collect();
        if nodes.iter().any(|&v| lane.nodes[v].kind.is_gateway()) {
            out.insert((
                lane.edges[a].id.clone(),
                lane.edges[b].id.clone(),
                nodes.iter().map(|&v| lane.nodes[v].id.clone()).collect(),
            ));
        }
    }
    out
}
