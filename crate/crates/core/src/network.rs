//! Sensor communication graph and its row-stochastic consensus matrix.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::digraph::{scc_decompose, SystemDigraph};
use crate::error::{Error, Result};

/// How consensus weights are chosen within each neighborhood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusRule {
    /// `W_ij = 1 / |N(i)|`.
    #[default]
    Uniform,
    /// `U(0.1, 1)` draws normalized per row.
    Random,
}

/// Edge `(j, i)` means sensor `j` sends its estimate to sensor `i`, so
/// `W_ij > 0`. Self-loops are always present.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorNetwork {
    n: usize,
    edges: Vec<(usize, usize)>,
    w: DMatrix<f64>,
}

fn with_self_loops(n: usize, edges: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut all = Vec::with_capacity(edges.len() + n);
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(Error::InvalidInput(format!("edge ({a}, {b}) outside 0..{n}")));
        }
        all.push((a, b));
    }
    all.extend((0..n).map(|i| (i, i)));
    all.sort_unstable();
    all.dedup();
    Ok(all)
}

pub fn build_row_stochastic(n: usize, edges: &[(usize, usize)], rule: ConsensusRule, seed: u64) -> Result<SensorNetwork> {
    let edges = with_self_loops(n, edges)?;
    let mut w = DMatrix::zeros(n, n);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for &(from, to) in &edges {
        w[(to, from)] = match rule {
            ConsensusRule::Uniform => 1.0,
            ConsensusRule::Random => rng.random_range(0.1..1.0),
        };
    }
    for i in 0..n {
        let s: f64 = w.row(i).sum();
        w.row_mut(i).scale_mut(1.0 / s);
    }
    Ok(SensorNetwork { n, edges, w })
}

/// Edges `i <-> i+1` around a ring.
pub fn cycle_edges(n: usize) -> Vec<(usize, usize)> {
    if n < 2 {
        return Vec::new();
    }
    (0..n).flat_map(|i| [(i, (i + 1) % n), ((i + 1) % n, i)]).collect()
}

pub fn is_strongly_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    scc_decompose(&SystemDigraph::from_edges(n, edges.iter().copied())).sccs().len() == 1
}

impl SensorNetwork {
    /// Wraps a given matrix after checking the row-stochastic invariants.
    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self> {
        let n = w.nrows();
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        crate::error::check_dim("W columns", n, w.ncols())?;
        let mut edges = Vec::new();
        for i in 0..n {
            if w[(i, i)] <= 0.0 {
                return Err(Error::InvalidInput(format!("W[{i},{i}] must be positive")));
            }
            let s: f64 = w.row(i).sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("row {i} of W sums to {s}")));
            }
            for j in 0..n {
                if w[(i, j)] < 0.0 {
                    return Err(Error::InvalidInput(format!("W[{i},{j}] is negative")));
                }
                if w[(i, j)] > 0.0 {
                    edges.push((j, i));
                }
            }
        }
        edges.sort_unstable();
        Ok(Self { n, edges, w })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// All edges including self-loops.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Edges without self-loops.
    pub fn links(&self) -> Vec<(usize, usize)> {
        self.edges.iter().copied().filter(|(a, b)| a != b).collect()
    }

    /// `N(i) = { j : j -> i } ∪ { i }`, ascending.
    pub fn neighborhood(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.w[(i, j)] > 0.0).collect()
    }

    pub fn is_strongly_connected(&self) -> bool {
        is_strongly_connected(self.n, &self.edges)
    }

    /// Row-major rows of `W`.
    pub fn w_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.w.row(i).iter().cloned().collect()).collect()
    }
}

/// Removes node `k` and renumbers the rest. Returns the surviving edges.
pub fn remove_node(edges: &[(usize, usize)], k: usize) -> Vec<(usize, usize)> {
    let shift = |v: usize| if v > k { v - 1 } else { v };
    edges
        .iter()
        .filter(|&&(a, b)| a != k && b != k)
        .map(|&(a, b)| (shift(a), shift(b)))
        .collect()
}

/// Adds edges until the graph is strongly connected and returns the added ones.
///
/// Each round links a sink component to a source component, preferring a
/// source that cannot already reach that sink.
pub fn repair_strong_connectivity(n: usize, edges: &mut Vec<(usize, usize)>) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut added = Vec::new();
    for _ in 0..=n {
        let g = SystemDigraph::from_edges(n, edges.iter().copied());
        let dec = scc_decompose(&g);
        let k = dec.sccs().len();
        if k == 1 {
            return Ok(added);
        }
        let mut has_in = vec![false; k];
        let mut has_out = vec![false; k];
        for &(a, b) in dec.condensation_edges() {
            has_out[a] = true;
            has_in[b] = true;
        }
        let sinks: Vec<usize> = (0..k).filter(|&c| !has_out[c]).collect();
        let sources: Vec<usize> = (0..k).filter(|&c| !has_in[c]).collect();
        let reach = condensation_reach(k, dec.condensation_edges());
        let sink = sinks[0];
        let source = sources
            .iter()
            .copied()
            .find(|&s| s != sink && !reach[s][sink])
            .or_else(|| sources.iter().copied().find(|&s| s != sink))
            .or_else(|| (0..k).find(|&c| c != sink))
            .ok_or(Error::NetworkRepair)?;
        let e = (dec.sccs()[sink][0], dec.sccs()[source][0]);
        edges.push(e);
        added.push(e);
    }
    Err(Error::NetworkRepair)
}

fn condensation_reach(k: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut reach = vec![vec![false; k]; k];
    for (c, row) in reach.iter_mut().enumerate() {
        row[c] = true;
    }
    for &(a, b) in edges {
        reach[a][b] = true;
    }
    for m in 0..k {
        for i in 0..k {
            if reach[i][m] {
                for j in 0..k {
                    if reach[m][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    reach
}
