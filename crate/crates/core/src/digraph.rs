//! System digraph, strongly connected components and observational equivalence.

use serde::{Deserialize, Serialize};

use crate::system::{MeasurementModel, StructuredMatrix};

/// Directed graph over state nodes; pattern entry `(i, j)` is the edge `i -> j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SystemDigraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    succ: Vec<Vec<usize>>,
}

impl SystemDigraph {
    /// Duplicate edges are kept once.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut edges: Vec<(usize, usize)> = edges.into_iter().filter(|&(i, j)| i < n && j < n).collect();
        edges.sort_unstable();
        edges.dedup();
        let mut succ = vec![Vec::new(); n];
        for &(i, j) in &edges {
            succ[i].push(j);
        }
        Self { n, edges, succ }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn successors(&self, i: usize) -> &[usize] {
        &self.succ[i]
    }

    pub fn self_loops(&self) -> usize {
        self.edges.iter().filter(|(i, j)| i == j).count()
    }
}

pub fn build_digraph(pattern: &StructuredMatrix) -> SystemDigraph {
    SystemDigraph::from_edges(pattern.n(), pattern.nonzeros())
}

/// SCCs ordered by their smallest member; members ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SccDecomposition {
    sccs: Vec<Vec<usize>>,
    component: Vec<usize>,
    condensation: Vec<(usize, usize)>,
    parent: Vec<bool>,
}

impl SccDecomposition {
    pub fn sccs(&self) -> &[Vec<usize>] {
        &self.sccs
    }

    /// Index into [`Self::sccs`] of the component holding `node`.
    pub fn component_of(&self, node: usize) -> usize {
        self.component[node]
    }

    pub fn condensation_edges(&self) -> &[(usize, usize)] {
        &self.condensation
    }

    pub fn is_parent(&self, scc: usize) -> bool {
        self.parent[scc]
    }

    pub fn parents(&self) -> Vec<&[usize]> {
        self.sccs
            .iter()
            .zip(&self.parent)
            .filter(|(_, &p)| p)
            .map(|(s, _)| s.as_slice())
            .collect()
    }

    /// States that lie in no parent SCC.
    pub fn non_parent_states(&self) -> Vec<usize> {
        (0..self.component.len()).filter(|&v| !self.parent[self.component[v]]).collect()
    }

    /// JSON-friendly view with 1-based node labels and 0-based SCC positions.
    pub fn report(&self) -> SccReport {
        SccReport {
            sccs: self.sccs.iter().map(|s| s.iter().map(|v| v + 1).collect()).collect(),
            parents: (0..self.sccs.len()).filter(|&c| self.parent[c]).collect(),
            condensation_edges: self.condensation.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SccReport {
    pub sccs: Vec<Vec<usize>>,
    pub parents: Vec<usize>,
    pub condensation_edges: Vec<[usize; 2]>,
}

/// Tarjan's algorithm with an explicit call stack, then the condensation.
pub fn scc_decompose(g: &SystemDigraph) -> SccDecomposition {
    const UNSEEN: usize = usize::MAX;
    let n = g.n();
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut raw: Vec<Vec<usize>> = Vec::new();
    let mut next_index = 0usize;
    // (node, position in its successor list)
    let mut call: Vec<(usize, usize)> = Vec::new();

    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        call.push((root, 0));
        index[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut pos)) = call.last_mut() {
            let succ = g.successors(v);
            if *pos < succ.len() {
                let w = succ[*pos];
                *pos += 1;
                if index[w] == UNSEEN {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(u, _)) = call.last() {
                low[u] = low[u].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack holds the root");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comp.sort_unstable();
                raw.push(comp);
            }
        }
    }

    raw.sort_by_key(|c| c[0]);
    let mut component = vec![0usize; n];
    for (ci, comp) in raw.iter().enumerate() {
        for &v in comp {
            component[v] = ci;
        }
    }
    let mut condensation: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .map(|&(i, j)| (component[i], component[j]))
        .filter(|(a, b)| a != b)
        .collect();
    condensation.sort_unstable();
    condensation.dedup();
    let mut parent = vec![true; raw.len()];
    for &(a, _) in &condensation {
        parent[a] = false;
    }
    SccDecomposition { sccs: raw, component, condensation, parent }
}

/// The parent SCC containing `state`, or empty if `state` is in no parent SCC.
pub fn equivalence_class(dec: &SccDecomposition, state: usize) -> Vec<usize> {
    let c = dec.component_of(state);
    if dec.is_parent(c) {
        dec.sccs()[c].clone()
    } else {
        Vec::new()
    }
}

/// What losing one sensor means for observability.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "states", rename_all = "snake_case")]
pub enum Replacement {
    /// Unmeasured members of the same parent SCC, ascending.
    ReplaceWith(Vec<usize>),
    /// No healthy coverage is lost: the state lies in no parent SCC, or a
    /// healthy sensor already measures its parent SCC.
    RemovalSafe,
    /// The measured state is alone in its parent SCC and nobody else measures it.
    Irreplaceable,
}

pub fn replacement_candidates(dec: &SccDecomposition, mm: &MeasurementModel, faulty_sensor: usize) -> Replacement {
    replacement_candidates_excluding(dec, mm, &[faulty_sensor], faulty_sensor)
}

/// Like [`replacement_candidates`] but treats every sensor in `faulty` as
/// unavailable, so concurrent faults do not count on each other.
pub fn replacement_candidates_excluding(
    dec: &SccDecomposition,
    mm: &MeasurementModel,
    faulty: &[usize],
    sensor: usize,
) -> Replacement {
    let state = mm.sensor(sensor).state;
    let class = equivalence_class(dec, state);
    if class.is_empty() {
        return Replacement::RemovalSafe;
    }
    let healthy: Vec<usize> = mm
        .sensors()
        .iter()
        .enumerate()
        .filter(|(i, _)| !faulty.contains(i))
        .map(|(_, s)| s.state)
        .collect();
    if class.iter().any(|v| healthy.contains(v)) {
        return Replacement::RemovalSafe;
    }
    let candidates: Vec<usize> = class.into_iter().filter(|&v| v != state).collect();
    if candidates.is_empty() {
        Replacement::Irreplaceable
    } else {
        Replacement::ReplaceWith(candidates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_convention() {
        let p = StructuredMatrix::from_fn(4, |i, j| i == 1 && j == 2).unwrap();
        let g = build_digraph(&p);
        assert_eq!(g.edges(), &[(1, 2)]);
    }

    #[test]
    fn identity_is_isolated_self_loops() {
        let g = build_digraph(&StructuredMatrix::identity(3).unwrap());
        assert_eq!(g.self_loops(), 3);
        let dec = scc_decompose(&g);
        assert_eq!(dec.sccs().len(), 3);
        assert!(dec.condensation_edges().is_empty());
        assert_eq!(dec.parents().len(), 3);
    }

    #[test]
    fn complete_graph_single_parent() {
        let dec = scc_decompose(&build_digraph(&StructuredMatrix::full(5).unwrap()));
        assert_eq!(dec.sccs(), &[vec![0, 1, 2, 3, 4]]);
        assert!(dec.is_parent(0));
    }

    #[test]
    fn chain_has_sink_parent() {
        let g = SystemDigraph::from_edges(3, [(0, 1), (1, 2)]);
        let dec = scc_decompose(&g);
        assert_eq!(dec.parents(), vec![&[2][..]]);
        assert_eq!(equivalence_class(&dec, 0), Vec::<usize>::new());
        assert_eq!(equivalence_class(&dec, 2), vec![2]);
    }

    #[test]
    fn replacement_verdicts() {
        // 0 -> {1,2} cycle; {1,2} is the only parent.
        let g = SystemDigraph::from_edges(3, [(0, 1), (1, 2), (2, 1)]);
        let dec = scc_decompose(&g);
        let mm = MeasurementModel::unit(3, &[1, 0], 0.1).unwrap();
        assert_eq!(replacement_candidates(&dec, &mm, 0), Replacement::ReplaceWith(vec![2]));
        assert_eq!(replacement_candidates(&dec, &mm, 1), Replacement::RemovalSafe);
        let both = MeasurementModel::unit(3, &[1, 2], 0.1).unwrap();
        assert_eq!(replacement_candidates(&dec, &both, 0), Replacement::RemovalSafe);

        let g = SystemDigraph::from_edges(2, [(0, 1)]);
        let dec = scc_decompose(&g);
        let mm = MeasurementModel::unit(2, &[1], 0.1).unwrap();
        assert_eq!(replacement_candidates(&dec, &mm, 0), Replacement::Irreplaceable);
    }
}
