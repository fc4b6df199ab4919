//! Interpolation graph over subsets of differing latent dimensions.
//!
//! A node is a bitmask over the graph's dimensions: bit `i` set means the
//! `i`-th differing dimension already holds the exemplar's value. There is an
//! edge from every subset to every strict superset, so integer order is a
//! topological order.

use serde::{Deserialize, Serialize};

use super::GraphParams;
use crate::error::{Error, Result};

/// Largest dimension count a graph may span (`3^16` edges is already far
/// beyond anything evaluated here).
pub const MAX_GRAPH_DIMS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: u32,
    pub to: u32,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpGraph {
    /// Latent dimensions spanned by the graph, ascending.
    pub dims: Vec<usize>,
    /// Outgoing edges per node, targets ascending.
    pub out: Vec<Vec<(u32, f64)>>,
}

/// Cost of moving from `S` to `T`, given D's probability that the decoded
/// `T` is real and CD's probability that the change `S -> T` is good.
pub fn edge_weight(d_prob: f64, cd_prob: f64, k: usize, p: &GraphParams) -> f64 {
    (p.alpha_g * (1.0 - d_prob) + p.beta_g * (1.0 - cd_prob)) * (k as f64).powf(p.gamma_g)
}

/// Every `(S, T)` with `S` a strict subset of `T` over `n` dimensions, grouped
/// by `S` ascending and then `T` ascending.
pub fn lattice_edges(n: usize) -> Vec<(u32, u32)> {
    let full: u32 = (1u32 << n) - 1;
    let mut edges = Vec::new();
    for s in 0..=full {
        let rest = full & !s;
        let mut targets = Vec::new();
        // Enumerate non-empty submasks of the complement.
        let mut sub = rest;
        while sub != 0 {
            targets.push(s | sub);
            sub = (sub - 1) & rest;
        }
        targets.sort_unstable();
        edges.extend(targets.into_iter().map(|t| (s, t)));
    }
    edges
}

impl InterpGraph {
    /// Builds the lattice over `dims` with weights from `weight(S, T)`.
    pub fn with_weights(dims: Vec<usize>, mut weight: impl FnMut(u32, u32) -> f64) -> Result<InterpGraph> {
        let n = dims.len();
        if n > MAX_GRAPH_DIMS {
            return Err(Error::invalid(format!("graph over {n} dimensions is too large")));
        }
        let mut out = vec![Vec::new(); 1 << n];
        for (s, t) in lattice_edges(n) {
            let w = weight(s, t);
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("edge weight {w} on {s}->{t}")));
            }
            out[s as usize].push((t, w));
        }
        Ok(InterpGraph { dims, out })
    }

    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.out.len()
    }

    pub fn n_edges(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    pub fn sink(&self) -> u32 {
        (self.out.len() - 1) as u32
    }

    pub fn weight(&self, s: u32, t: u32) -> Option<f64> {
        self.out.get(s as usize)?.iter().find(|e| e.0 == t).map(|e| e.1)
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.out.iter().enumerate().flat_map(|(s, v)| {
            v.iter().map(move |&(t, weight)| Edge {
                from: s as u32,
                to: t,
                weight,
            })
        })
    }

    pub fn path_cost(&self, path: &[u32]) -> Option<f64> {
        path.windows(2).map(|w| self.weight(w[0], w[1])).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortestPath {
    /// Node masks from the empty set to the full set.
    pub nodes: Vec<u32>,
    pub edge_costs: Vec<f64>,
    pub cost: f64,
}

/// Minimum-weight path from the empty set to the full set by one backward
/// relaxation in reverse topological order. Ties go to the smaller next
/// node, which yields the lexicographically smallest node sequence.
pub fn shortest_path(g: &InterpGraph) -> ShortestPath {
    let n = g.n_nodes();
    let sink = g.sink() as usize;
    let mut cost = vec![f64::INFINITY; n];
    let mut next = vec![u32::MAX; n];
    cost[sink] = 0.0;
    for s in (0..sink).rev() {
        for &(t, w) in &g.out[s] {
            let c = w + cost[t as usize];
            if c < cost[s] {
                cost[s] = c;
                next[s] = t;
            }
        }
    }
    let mut nodes = vec![0u32];
    let mut edge_costs = Vec::new();
    let mut cur = 0usize;
    while cur != sink {
        let t = next[cur];
        edge_costs.push(g.weight(cur as u32, t).expect("edge on path"));
        nodes.push(t);
        cur = t as usize;
    }
    ShortestPath {
        nodes,
        edge_costs,
        cost: cost[0],
    }
}

/// All ordered partitions of `{0..n}` into non-empty blocks, as cumulative
/// node sequences from the empty set to the full set.
pub fn weak_ordering_paths(n: usize) -> Vec<Vec<u32>> {
    fn rec(cur: u32, full: u32, path: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur == full {
            out.push(path.clone());
            return;
        }
        let rest = full & !cur;
        let mut sub = rest;
        while sub != 0 {
            path.push(cur | sub);
            rec(cur | sub, full, path, out);
            path.pop();
            sub = (sub - 1) & rest;
        }
    }
    let full = (1u32 << n) - 1;
    let mut out = Vec::new();
    rec(0, full, &mut vec![0], &mut out);
    out
}

/// Counts source-to-sink paths by walking the graph's own edge lists.
pub fn count_paths(g: &InterpGraph) -> u64 {
    fn walk(g: &InterpGraph, s: u32) -> u64 {
        if s == g.sink() {
            return 1;
        }
        g.out[s as usize].iter().map(|&(t, _)| walk(g, t)).sum()
    }
    walk(g, 0)
}

/// Minimum over every weak ordering of the graph's dimensions, by
/// exhaustive enumeration.
pub fn brute_force_shortest(g: &InterpGraph) -> (f64, Vec<u32>) {
    let mut best = (f64::INFINITY, Vec::new());
    for p in weak_ordering_paths(g.n_dims()) {
        let c = g.path_cost(&p).expect("lattice path");
        if c < best.0 {
            best = (c, p);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_graph(n: usize, seed: u64) -> InterpGraph {
        let mut rng = crate::seed::rng_for(seed, &[]);
        InterpGraph::with_weights((0..n).collect(), |_, _| rng.gen_range(0.0..3.0)).unwrap()
    }

    #[test]
    fn counts_follow_lattice() {
        for n in 0..=8usize {
            let g = InterpGraph::with_weights((0..n).collect(), |_, _| 1.0).unwrap();
            assert_eq!(g.n_nodes(), 1 << n);
            assert_eq!(g.n_edges(), 3usize.pow(n as u32) - (1 << n));
        }
    }

    #[test]
    fn three_dims_give_eight_nodes_nineteen_edges_thirteen_paths() {
        let g = InterpGraph::with_weights(vec![0, 4, 5], |_, _| 1.0).unwrap();
        assert_eq!((g.n_nodes(), g.n_edges(), count_paths(&g)), (8, 19, 13));
    }

    #[test]
    fn path_counts_are_ordered_bell_numbers() {
        for (n, want) in [1u64, 1, 3, 13, 75, 541].into_iter().enumerate() {
            let g = InterpGraph::with_weights((0..n).collect(), |_, _| 0.0).unwrap();
            assert_eq!(count_paths(&g), want);
            assert_eq!(weak_ordering_paths(n).len() as u64, want);
        }
    }

    #[test]
    fn single_dim_path() {
        let g = InterpGraph::with_weights(vec![2], |_, _| 0.7).unwrap();
        let p = shortest_path(&g);
        assert_eq!((p.nodes, p.cost), (vec![0, 1], 0.7));
    }

    #[test]
    fn empty_graph_has_empty_path() {
        let g = InterpGraph::with_weights(vec![], |_, _| 1.0).unwrap();
        let p = shortest_path(&g);
        assert_eq!((g.n_nodes(), g.n_edges(), p.nodes, p.cost), (1, 0, vec![0], 0.0));
    }

    #[test]
    fn edge_weight_examples() {
        let p = GraphParams::default();
        assert_eq!(edge_weight(1.0, 1.0, 3, &p), 0.0);
        assert_eq!(edge_weight(0.0, 0.0, 2, &p), 3.0);
        let flat = GraphParams { gamma_g: 0.0, ..p };
        assert_eq!(edge_weight(0.3, 0.6, 1, &flat), edge_weight(0.3, 0.6, 5, &flat));
    }

    #[test]
    fn ties_pick_smallest_sequence() {
        let g = InterpGraph::with_weights(vec![0, 1], |_, _| 1.0).unwrap();
        assert_eq!(shortest_path(&g).nodes, vec![0, 3]);
        let g = InterpGraph::with_weights(vec![0, 1], |s, t| if s == 0 && t == 3 { 9.0 } else { 1.0 }).unwrap();
        assert_eq!(shortest_path(&g).nodes, vec![0, 1, 3]);
    }

    #[test]
    fn negative_weight_rejected() {
        assert!(InterpGraph::with_weights(vec![0], |_, _| -1.0).is_err());
    }

    proptest! {
        #[test]
        fn dag_path_matches_enumeration(n in 0usize..=4, seed in any::<u64>()) {
            let g = random_graph(n, seed);
            let p = shortest_path(&g);
            let (c, _) = brute_force_shortest(&g);
            prop_assert!((p.cost - c).abs() <= 1e-12);
            prop_assert!((g.path_cost(&p.nodes).unwrap() - p.cost).abs() <= 1e-12);
        }

        #[test]
        fn path_strictly_grows_and_beats_simple_paths(n in 1usize..=4, seed in any::<u64>()) {
            let g = random_graph(n, seed);
            let p = shortest_path(&g);
            for w in p.nodes.windows(2) {
                prop_assert!(w[0] & w[1] == w[0] && w[0] != w[1]);
            }
            prop_assert!(p.cost <= g.weight(0, g.sink()).unwrap() + 1e-12);
            let mut one_at_a_time = vec![0u32];
            for i in 0..n {
                one_at_a_time.push(one_at_a_time[i] | (1 << i));
            }
            prop_assert!(p.cost <= g.path_cost(&one_at_a_time).unwrap() + 1e-12);
        }
    }
}
