//! Weighted least-squares isotonic regression over a partial order.
//!
//! Exact solver by recursive partitioning: a block with weighted mean `m` is split
//! into its maximum-gain upper set `U` (maximizing the sum of `w_i (y_i - m)` over
//! upper-closed subsets) and the remainder, until no split has positive gain. The
//! upper set is found as a maximum-weight closure through a min cut.

use std::collections::VecDeque;

use crate::grid::{DcCoord, DcMap};

/// Projection of `values` onto matrices nondecreasing along every row and column.
pub fn bivariate_isotonic(values: &DcMap<f64>, weights: &DcMap<f64>) -> DcMap<f64> {
    assert_eq!(values.grid(), weights.grid(), "value and weight grids differ");
    let grid = values.grid();
    let coords: Vec<DcCoord> = grid.coords().collect();
    let fitted = isotonic_partial_order(values.values(), weights.values(), |a, b| coords[a].le_partial(&coords[b]));
    DcMap::from_fn(grid, |c| fitted[grid.index(c)])
}

/// Weighted isotonic regression for an arbitrary partial order given by `le(a, b)`
/// (reflexive, transitive). Weights must be positive.
pub fn isotonic_partial_order(y: &[f64], w: &[f64], le: impl Fn(usize, usize) -> bool) -> Vec<f64> {
    assert_eq!(y.len(), w.len());
    assert!(w.iter().all(|&x| x > 0.0), "weights must be positive");
    let mut fit = vec![0.0; y.len()];
    if y.is_empty() {
        return fit;
    }
    let mut pending = vec![(0..y.len()).collect::<Vec<usize>>()];
    while let Some(block) = pending.pop() {
        let wsum: f64 = block.iter().map(|&k| w[k]).sum();
        let mean = block.iter().map(|&k| w[k] * y[k]).sum::<f64>() / wsum;
        if block.len() == 1 {
            fit[block[0]] = mean;
            continue;
        }
        let gains: Vec<f64> = block.iter().map(|&k| w[k] * (y[k] - mean)).collect();
        let scale: f64 = gains.iter().map(|g| g.abs()).sum();
        let (upper, gain) = max_upper_set(&block, &gains, &le);
        if upper.is_empty() || upper.len() == block.len() || gain <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            for &k in &block {
                fit[k] = mean;
            }
            continue;
        }
        let lower: Vec<usize> = block.iter().copied().filter(|k| !upper.contains(k)).collect();
        pending.push(upper);
        pending.push(lower);
    }
    fit
}

/// Upper-closed subset of `block` (within the order restricted to `block`)
/// maximizing the total gain, with that gain.
fn max_upper_set(block: &[usize], gains: &[f64], le: &impl Fn(usize, usize) -> bool) -> (Vec<usize>, f64) {
    let m = block.len();
    let source = m;
    let sink = m + 1;
    let inf = gains.iter().map(|g| g.abs()).sum::<f64>() * 2.0 + 1.0;
    let mut net = FlowNetwork::new(m + 2);
    let mut positive = 0.0;
    for (a, &g) in gains.iter().enumerate() {
        if g > 0.0 {
            net.add(source, a, g);
            positive += g;
        } else if g < 0.0 {
            net.add(a, sink, -g);
        }
    }
    // Choosing a forces choosing every b above it.
    for a in 0..m {
        for b in 0..m {
            if a != b && le(block[a], block[b]) {
                net.add(a, b, inf);
            }
        }
    }
    let cut = net.max_flow(source, sink);
    let reach = net.reachable(source);
    let chosen: Vec<usize> = (0..m).filter(|&a| reach[a]).map(|a| block[a]).collect();
    (chosen, positive - cut)
}

/// Dense Edmonds-Karp; networks here have a few dozen nodes at most.
struct FlowNetwork {
    n: usize,
    residual: Vec<f64>,
}

impl FlowNetwork {
    fn new(n: usize) -> Self {
        Self { n, residual: vec![0.0; n * n] }
    }

    fn add(&mut self, from: usize, to: usize, cap: f64) {
        self.residual[from * self.n + to] += cap;
    }

    fn bfs(&self, s: usize) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.n];
        parent[s] = Some(s);
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            let row = &self.residual[u * self.n..(u + 1) * self.n];
            for (v, &cap) in row.iter().enumerate() {
                if parent[v].is_none() && cap > 1e-15 {
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        parent
    }

    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut total = 0.0;
        loop {
            let parent = self.bfs(s);
            if parent[t].is_none() {
                return total;
            }
            let mut bottleneck = f64::INFINITY;
            let mut v = t;
            while v != s {
                let u = parent[v].unwrap();
                bottleneck = bottleneck.min(self.residual[u * self.n + v]);
                v = u;
            }
            let mut v = t;
            while v != s {
                let u = parent[v].unwrap();
                self.residual[u * self.n + v] -= bottleneck;
                self.residual[v * self.n + u] += bottleneck;
                v = u;
            }
            total += bottleneck;
        }
    }

    fn reachable(&self, s: usize) -> Vec<bool> {
        self.bfs(s).into_iter().map(|p| p.is_some()).collect()
    }
}
