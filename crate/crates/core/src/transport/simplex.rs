//! Primal network simplex for the uncapacitated transportation problem.
//!
//! Sources `0..m` carry supply `a_i`, sinks `m..m+n` demand `b_j`, and an
//! artificial root is joined to every node by a high-cost arc that forms the
//! initial spanning tree. Leaving arcs are chosen so the tree stays strongly
//! feasible (zero-flow tree arcs always point away from the root), which rules
//! out cycling on degenerate pivots. Entering arcs come from a block search
//! over reduced costs.
//!
//! The tree (parent pointers, depths, potentials) is rebuilt by a traversal
//! from the root after each pivot; with at most a few hundred nodes this is
//! cheaper than the pricing step.

use ndarray::Array2;

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

struct Network {
    m: usize,
    n: usize,
    source: Vec<usize>,
    target: Vec<usize>,
    cost: Vec<f64>,
    flow: Vec<f64>,
    in_tree: Vec<bool>,
    // per node
    parent: Vec<usize>,
    pred: Vec<usize>,
    /// `pred[u]` is oriented `u -> parent[u]`.
    pred_up: Vec<bool>,
    depth: Vec<usize>,
    pi: Vec<f64>,
    adjacency: Vec<Vec<usize>>,
    stack: Vec<usize>,
}

impl Network {
    fn root(&self) -> usize {
        self.m + self.n
    }

    fn nodes(&self) -> usize {
        self.m + self.n + 1
    }

    fn reduced_cost(&self, e: usize) -> f64 {
        self.cost[e] + self.pi[self.source[e]] - self.pi[self.target[e]]
    }

    /// Recompute parent/pred/depth/potentials from the current tree arcs.
    fn rebuild_tree(&mut self) {
        let root = self.root();
        for adj in &mut self.adjacency {
            adj.clear();
        }
        for u in 0..self.nodes() {
            if u != root {
                let e = self.pred[u];
                self.adjacency[self.source[e]].push(e);
                self.adjacency[self.target[e]].push(e);
            }
        }
        self.parent[root] = NONE;
        self.depth[root] = 0;
        self.pi[root] = 0.0;
        self.stack.clear();
        self.stack.push(root);
        while let Some(u) = self.stack.pop() {
            for k in 0..self.adjacency[u].len() {
                let e = self.adjacency[u][k];
                let v = if self.source[e] == u { self.target[e] } else { self.source[e] };
                if v == self.parent[u] && self.pred[u] == e {
                    continue;
                }
                self.parent[v] = u;
                self.pred[v] = e;
                self.depth[v] = self.depth[u] + 1;
                if self.source[e] == v {
                    self.pred_up[v] = true;
                    self.pi[v] = self.pi[u] - self.cost[e];
                } else {
                    self.pred_up[v] = false;
                    self.pi[v] = self.pi[u] + self.cost[e];
                }
                self.stack.push(v);
            }
        }
    }
}

/// Optimal plan for `min <C, P>` subject to `P 1 = a`, `P^T 1 = b`, `P >= 0`.
///
/// `a` and `b` must be strictly positive with equal totals.
pub(crate) fn solve(a: &[f64], b: &[f64], cost: &Array2<f64>) -> Result<Array2<f64>> {
    let (m, n) = (a.len(), b.len());
    assert_eq!(cost.dim(), (m, n), "cost matrix shape");
    let real = m * n;
    let nodes = m + n + 1;
    let root = m + n;

    let max_cost = cost.iter().fold(0.0f64, |acc, &c| acc.max(c.abs()));
    let art_cost = (max_cost + 1.0) * nodes as f64;
    let tol = 1e-14 * art_cost;

    let arcs = real + m + n;
    let mut net = Network {
        m,
        n,
        source: Vec::with_capacity(arcs),
        target: Vec::with_capacity(arcs),
        cost: Vec::with_capacity(arcs),
        flow: vec![0.0; arcs],
        in_tree: vec![false; arcs],
        parent: vec![root; nodes],
        pred: vec![NONE; nodes],
        pred_up: vec![false; nodes],
        depth: vec![1; nodes],
        pi: vec![0.0; nodes],
        adjacency: vec![Vec::new(); nodes],
        stack: Vec::with_capacity(nodes),
    };
    for i in 0..m {
        for j in 0..n {
            net.source.push(i);
            net.target.push(m + j);
            net.cost.push(cost[[i, j]]);
        }
    }
    for u in 0..m + n {
        let e = net.source.len();
        if u < m {
            net.source.push(u);
            net.target.push(root);
            net.flow[e] = a[u];
        } else {
            net.source.push(root);
            net.target.push(u);
            net.flow[e] = b[u - m];
        }
        net.cost.push(art_cost);
        net.in_tree[e] = true;
        net.pred[u] = e;
    }
    net.rebuild_tree();

    let block = ((arcs as f64).sqrt().ceil() as usize).max(10);
    let mut next_arc = 0usize;
    let max_pivots = 50 * arcs + 10_000;

    for _ in 0..max_pivots {
        // block search for an entering arc
        let mut best = NONE;
        let mut best_rc = -tol;
        let mut in_block = 0;
        for _ in 0..arcs {
            let e = next_arc;
            next_arc = if next_arc + 1 == arcs { 0 } else { next_arc + 1 };
            if !net.in_tree[e] {
                let rc = net.reduced_cost(e);
                if rc < best_rc {
                    best_rc = rc;
                    best = e;
                }
            }
            in_block += 1;
            if in_block == block {
                if best != NONE {
                    break;
                }
                in_block = 0;
            }
        }
        if best == NONE {
            return Ok(extract_plan(&net, m, n));
        }
        let entering = best;

        // apex of the cycle closed by the entering arc
        let first = net.source[entering];
        let second = net.target[entering];
        let (mut u, mut v) = (first, second);
        while u != v {
            if net.depth[u] >= net.depth[v] {
                u = net.parent[u];
            } else {
                v = net.parent[v];
            }
        }
        let join = u;

        // leaving arc: last blocking arc in cycle orientation from the apex
        let mut delta = f64::INFINITY;
        let mut u_out = NONE;
        let mut u = first;
        while u != join {
            if net.pred_up[u] {
                let d = net.flow[net.pred[u]];
                if d < delta {
                    delta = d;
                    u_out = u;
                }
            }
            u = net.parent[u];
        }
        let mut u = second;
        while u != join {
            if !net.pred_up[u] {
                let d = net.flow[net.pred[u]];
                if d <= delta {
                    delta = d;
                    u_out = u;
                }
            }
            u = net.parent[u];
        }
        if u_out == NONE {
            return Err(Error::Transport("unbounded transport problem".into()));
        }

        if delta > 0.0 {
            net.flow[entering] += delta;
            let mut u = first;
            while u != join {
                let e = net.pred[u];
                if net.pred_up[u] {
                    net.flow[e] -= delta;
                } else {
                    net.flow[e] += delta;
                }
                u = net.parent[u];
            }
            let mut u = second;
            while u != join {
                let e = net.pred[u];
                if net.pred_up[u] {
                    net.flow[e] += delta;
                } else {
                    net.flow[e] -= delta;
                }
                u = net.parent[u];
            }
        }

        let leaving = net.pred[u_out];
        net.flow[leaving] = 0.0;
        net.in_tree[leaving] = false;
        net.in_tree[entering] = true;
        // swap the arc in the tree's arc set; the rebuild re-derives orientation
        net.pred[u_out] = entering;
        net.rebuild_tree();
    }
    Err(Error::Transport(format!(
        "network simplex did not converge within {max_pivots} pivots"
    )))
}

fn extract_plan(net: &Network, m: usize, n: usize) -> Array2<f64> {
    let mut plan = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            plan[[i, j]] = net.flow[i * n + j].max(0.0);
        }
    }
    plan
}
