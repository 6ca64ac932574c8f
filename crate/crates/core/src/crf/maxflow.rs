//! Dinic max-flow on small dense-ish graphs, used for binary expansion moves.

use std::collections::VecDeque;

const EPS: f64 = 1e-12;
const NONE: usize = usize::MAX;

/// Adjacency is a linked list per node (`head`, `next`) so building a graph
/// costs a handful of allocations.
pub(crate) struct FlowGraph {
    head: Vec<usize>,
    next: Vec<usize>,
    to: Vec<usize>,
    cap: Vec<f64>,
    level: Vec<i32>,
    cursor: Vec<usize>,
}

impl FlowGraph {
    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        FlowGraph {
            head: vec![NONE; nodes],
            next: Vec::with_capacity(2 * edges),
            to: Vec::with_capacity(2 * edges),
            cap: Vec::with_capacity(2 * edges),
            level: vec![-1; nodes],
            cursor: vec![NONE; nodes],
        }
    }

    fn push_arc(&mut self, from: usize, to: usize, cap: f64) {
        self.next.push(self.head[from]);
        self.head[from] = self.to.len();
        self.to.push(to);
        self.cap.push(cap);
    }

    pub fn add_edge(&mut self, from: usize, to: usize, cap: f64) {
        if cap <= EPS {
            return;
        }
        self.push_arc(from, to, cap);
        self.push_arc(to, from, 0.0);
    }

    fn bfs(&mut self, s: usize, t: usize, queue: &mut VecDeque<usize>) -> bool {
        self.level.iter_mut().for_each(|l| *l = -1);
        self.level[s] = 0;
        queue.clear();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            let mut e = self.head[u];
            while e != NONE {
                let v = self.to[e];
                if self.cap[e] > EPS && self.level[v] < 0 {
                    self.level[v] = self.level[u] + 1;
                    queue.push_back(v);
                }
                e = self.next[e];
            }
        }
        self.level[t] >= 0
    }

    fn dfs(&mut self, u: usize, t: usize, pushed: f64) -> f64 {
        if u == t {
            return pushed;
        }
        while self.cursor[u] != NONE {
            let e = self.cursor[u];
            let v = self.to[e];
            if self.cap[e] > EPS && self.level[v] == self.level[u] + 1 {
                let got = self.dfs(v, t, pushed.min(self.cap[e]));
                if got > EPS {
                    self.cap[e] -= got;
                    self.cap[e ^ 1] += got;
                    return got;
                }
            }
            self.cursor[u] = self.next[e];
        }
        0.0
    }

    pub fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        let mut queue = VecDeque::with_capacity(self.head.len());
        while self.bfs(s, t, &mut queue) {
            self.cursor.copy_from_slice(&self.head);
            loop {
                let f = self.dfs(s, t, f64::INFINITY);
                if f <= EPS {
                    break;
                }
                flow += f;
            }
        }
        flow
    }

    /// After `max_flow`: nodes still reachable from `s` in the residual graph.
    pub fn source_side(&self, s: usize) -> Vec<bool> {
        let mut seen = vec![false; self.head.len()];
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            let mut e = self.head[u];
            while e != NONE {
                let v = self.to[e];
                if self.cap[e] > EPS && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
                e = self.next[e];
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_small_network() {
        // CLRS figure 26.1: max flow 23
        let mut g = FlowGraph::with_capacity(6, 9);
        for &(u, v, c) in &[
            (0, 1, 16.0),
            (0, 2, 13.0),
            (2, 1, 4.0),
            (1, 3, 12.0),
            (3, 2, 9.0),
            (2, 4, 14.0),
            (4, 3, 7.0),
            (3, 5, 20.0),
            (4, 5, 4.0),
        ] {
            g.add_edge(u, v, c);
        }
        assert!((g.max_flow(0, 5) - 23.0).abs() < 1e-9);
        let side = g.source_side(0);
        assert!(side[0] && !side[5]);
    }
}
