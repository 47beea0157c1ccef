//! Small index-based digraph utilities shared by validation and region
//! analysis: reachability, topological order, immediate dominators.

#[derive(Debug, Clone, Default)]
pub struct Digraph {
    pub succ: Vec<Vec<usize>>,
    pub pred: Vec<Vec<usize>>,
}

impl Digraph {
    pub fn new(n: usize) -> Self {
        Self {
            succ: vec![Vec::new(); n],
            pred: vec![Vec::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.succ.len()
    }

    pub fn is_empty(&self) -> bool {
        self.succ.is_empty()
    }

    pub fn add_edge(&mut self, from: usize, to: usize) {
        self.succ[from].push(to);
        self.pred[to].push(from);
    }

    pub fn add_node(&mut self) -> usize {
        self.succ.push(Vec::new());
        self.pred.push(Vec::new());
        self.succ.len() - 1
    }

    pub fn reversed(&self) -> Digraph {
        Digraph {
            succ: self.pred.clone(),
            pred: self.succ.clone(),
        }
    }

    pub fn reachable_from(&self, root: usize) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![root];
        seen[root] = true;
        while let Some(n) = stack.pop() {
            for &m in &self.succ[n] {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen
    }

    /// Kahn topological order, `None` if the graph has a cycle.
    pub fn topo_order(&self) -> Option<Vec<usize>> {
        let mut indeg: Vec<usize> = self.pred.iter().map(Vec::len).collect();
        let mut ready: Vec<usize> = (0..self.len()).filter(|&n| indeg[n] == 0).rev().collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(n) = ready.pop() {
            order.push(n);
            for &m in self.succ[n].iter().rev() {
                indeg[m] -= 1;
                if indeg[m] == 0 {
                    ready.push(m);
                }
            }
        }
        (order.len() == self.len()).then_some(order)
    }

    /// Immediate dominators from `root` (Cooper, Harvey & Kennedy). Nodes
    /// unreachable from `root` get `None`; the root is its own dominator.
    pub fn idoms(&self, root: usize) -> Vec<Option<usize>> {
        // Reverse postorder from root.
        let mut post = Vec::with_capacity(self.len());
        let mut visited = vec![false; self.len()];
        let mut stack = vec![(root, 0usize)];
        visited[root] = true;
        while let Some(&mut (n, ref mut next)) = stack.last_mut() {
            if let Some(&m) = self.succ[n].get(*next) {
                *next += 1;
                if !visited[m] {
                    visited[m] = true;
                    stack.push((m, 0));
                }
            } else {
                post.push(n);
                stack.pop();
            }
        }
        let mut rpo_index = vec![usize::MAX; self.len()];
        for (i, &n) in post.iter().rev().enumerate() {
            rpo_index[n] = i;
        }
        let mut idom: Vec<Option<usize>> = vec![None; self.len()];
        idom[root] = Some(root);
        let intersect = |idom: &[Option<usize>], mut a: usize, mut b: usize| {
            while a != b {
                while rpo_index[a] > rpo_index[b] {
                    a = idom[a].expect("processed");
                }
                while rpo_index[b] > rpo_index[a] {
                    b = idom[b].expect("processed");
                }
            }
            a
        };
        let mut changed = true;
        while changed {
            changed = false;
            for &n in post.iter().rev() {
                if n == root {
                    continue;
                }
                let mut new_idom = None;
                for &p in &self.pred[n] {
                    if idom[p].is_none() {
                        continue;
                    }
                    new_idom = Some(match new_idom {
                        None => p,
                        Some(cur) => intersect(&idom, p, cur),
                    });
                }
                if new_idom.is_some() && idom[n] != new_idom {
                    idom[n] = new_idom;
                    changed = true;
                }
            }
        }
        idom
    }
}

/// `a` dominates `b` given an idom array (reflexive).
pub fn dominates(idom: &[Option<usize>], a: usize, mut b: usize) -> bool {
    loop {
        if a == b {
            return true;
        }
        match idom[b] {
            Some(p) if p != b => b = p,
            _ => return false,
        }
    }
}
