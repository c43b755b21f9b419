//! Deterministic Louvain community detection on small weighted graphs.
//!
//! Nodes are swept in index order and ties break toward the smallest
//! community id, so the result depends only on the graph and the resolution
//! parameter. Graph sizes here are class counts (tens of nodes), so the
//! plain two-phase implementation is more than fast enough.

/// Undirected weighted graph as an adjacency list. Edges must be stored in
/// both directions; self weights are kept separately during aggregation.
#[derive(Debug, Clone)]
pub struct WeightedGraph {
    pub adj: Vec<Vec<(usize, f64)>>,
    pub self_weight: Vec<f64>,
}

impl WeightedGraph {
    pub fn new(n: usize) -> Self {
        Self {
            adj: vec![Vec::new(); n],
            self_weight: vec![0.0; n],
        }
    }

    pub fn add_edge(&mut self, a: usize, b: usize, w: f64) {
        if w <= 0.0 {
            return;
        }
        if a == b {
            self.self_weight[a] += w;
        } else {
            self.adj[a].push((b, w));
            self.adj[b].push((a, w));
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn total_weight(&self) -> f64 {
        let edges: f64 = self
            .adj
            .iter()
            .flat_map(|l| l.iter().map(|(_, w)| *w))
            .sum::<f64>()
            / 2.0;
        edges + self.self_weight.iter().sum::<f64>()
    }

    fn degree(&self, i: usize) -> f64 {
        self.adj[i].iter().map(|(_, w)| w).sum::<f64>() + 2.0 * self.self_weight[i]
    }
}

/// Runs Louvain to convergence and returns a community label per node,
/// renumbered to 0..n_communities in order of first appearance.
pub fn louvain(graph: &WeightedGraph, resolution: f64) -> Vec<usize> {
    let n = graph.node_count();
    if n == 0 {
        return Vec::new();
    }
    if graph.total_weight() <= 0.0 {
        return (0..n).collect();
    }

    // membership[i] = community of original node i, via the current level's
    // supernode mapping.
    let mut node_to_super: Vec<usize> = (0..n).collect();
    let mut level_graph = graph.clone();

    loop {
        let before = level_graph.node_count();
        let (assignment, moved) = one_level(&level_graph, resolution);
        if !moved {
            break;
        }
        for m in node_to_super.iter_mut() {
            *m = assignment[*m];
        }
        level_graph = aggregate(&level_graph, &assignment);
        if level_graph.node_count() <= 1 || level_graph.node_count() == before {
            break;
        }
    }
    renumber(&node_to_super)
}

/// One local-move phase. Returns the community per node (renumbered) and
/// whether any node changed community.
fn one_level(graph: &WeightedGraph, resolution: f64) -> (Vec<usize>, bool) {
    let n = graph.node_count();
    let m2: f64 = 2.0 * graph.total_weight();
    let degrees: Vec<f64> = (0..n).map(|i| graph.degree(i)).collect();
    let mut community: Vec<usize> = (0..n).collect();
    let mut comm_degree = degrees.clone();
    let mut any_move = false;

    let mut improved = true;
    let mut passes = 0;
    while improved && passes < 100 {
        improved = false;
        passes += 1;
        for i in 0..n {
            let current = community[i];
            let k_i = degrees[i];
            // Weight from i to each neighboring community.
            let mut to_comm: Vec<(usize, f64)> = Vec::new();
            for &(j, w) in &graph.adj[i] {
                let c = community[j];
                match to_comm.iter_mut().find(|(x, _)| *x == c) {
                    Some((_, acc)) => *acc += w,
                    None => to_comm.push((c, w)),
                }
            }
            comm_degree[current] -= k_i;
            let w_current = to_comm
                .iter()
                .find(|(c, _)| *c == current)
                .map_or(0.0, |(_, w)| *w);
            let gain_stay = w_current - resolution * k_i * comm_degree[current] / m2;
            let mut best_comm = current;
            let mut best_gain = gain_stay;
            to_comm.sort_by_key(|(c, _)| *c);
            for &(c, w) in &to_comm {
                if c == current {
                    continue;
                }
                let gain = w - resolution * k_i * comm_degree[c] / m2;
                if gain > best_gain + 1e-12 {
                    best_gain = gain;
                    best_comm = c;
                }
            }
            comm_degree[best_comm] += k_i;
            if best_comm != current {
                community[i] = best_comm;
                improved = true;
                any_move = true;
            }
        }
    }
    (renumber(&community), any_move)
}

fn aggregate(graph: &WeightedGraph, assignment: &[usize]) -> WeightedGraph {
    let n_comm = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = WeightedGraph::new(n_comm);
    for i in 0..graph.node_count() {
        let ci = assignment[i];
        out.self_weight[ci] += graph.self_weight[i];
        for &(j, w) in &graph.adj[i] {
            if j > i {
                let cj = assignment[j];
                if ci == cj {
                    out.self_weight[ci] += w;
                } else {
                    out.add_edge(ci, cj, w);
                }
            }
        }
    }
    // Merge parallel edges produced by the contraction.
    for list in out.adj.iter_mut() {
        list.sort_by_key(|(j, _)| *j);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(list.len());
        for &(j, w) in list.iter() {
            match merged.last_mut() {
                Some((lj, lw)) if *lj == j => *lw += w,
                _ => merged.push((j, w)),
            }
        }
        *list = merged;
    }
    out
}

fn renumber(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<Option<usize>> = vec![None; labels.len().max(labels.iter().map(|l| l + 1).max().unwrap_or(0))];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            *map[l].get_or_insert_with(|| {
                let id = next;
                next += 1;
                id
            })
        })
        .collect()
}

/// Modularity of a partition, used by tests to sanity-check improvements.
pub fn modularity(graph: &WeightedGraph, community: &[usize], resolution: f64) -> f64 {
    let m2 = 2.0 * graph.total_weight();
    if m2 <= 0.0 {
        return 0.0;
    }
    let n_comm = community.iter().copied().max().map_or(0, |m| m + 1);
    let mut intra = vec![0.0; n_comm];
    let mut degree = vec![0.0; n_comm];
    for i in 0..graph.node_count() {
        degree[community[i]] += graph.degree(i);
        intra[community[i]] += 2.0 * graph.self_weight[i];
        for &(j, w) in &graph.adj[i] {
            if community[i] == community[j] {
                intra[community[i]] += w;
            }
        }
    }
    (0..n_comm)
        .map(|c| intra[c] / m2 - resolution * (degree[c] / m2).powi(2))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cliques_split_into_two_communities() {
        let mut g = WeightedGraph::new(6);
        for a in 0..3 {
            for b in (a + 1)..3 {
                g.add_edge(a, b, 5.0);
                g.add_edge(a + 3, b + 3, 5.0);
            }
        }
        g.add_edge(2, 3, 0.5);
        let comm = louvain(&g, 1.0);
        assert_eq!(comm[0], comm[1]);
        assert_eq!(comm[1], comm[2]);
        assert_eq!(comm[3], comm[4]);
        assert_eq!(comm[4], comm[5]);
        assert_ne!(comm[0], comm[3]);
    }

    #[test]
    fn empty_graph_yields_singletons() {
        let g = WeightedGraph::new(4);
        assert_eq!(louvain(&g, 1.0), vec![0, 1, 2, 3]);
    }

    #[test]
    fn louvain_never_lowers_modularity_vs_singletons() {
        use rand::prelude::*;
        use rand_chacha::ChaCha12Rng;
        for seed in 0..10 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = 10;
            let mut g = WeightedGraph::new(n);
            for a in 0..n {
                for b in (a + 1)..n {
                    if rng.gen_bool(0.3) {
                        g.add_edge(a, b, rng.gen_range(1..10) as f64);
                    }
                }
            }
            if g.total_weight() <= 0.0 {
                continue;
            }
            let comm = louvain(&g, 1.0);
            let singletons: Vec<usize> = (0..n).collect();
            assert!(
                modularity(&g, &comm, 1.0) >= modularity(&g, &singletons, 1.0) - 1e-12,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn deterministic_output() {
        let mut g = WeightedGraph::new(8);
        g.add_edge(0, 1, 3.0);
        g.add_edge(1, 2, 2.0);
        g.add_edge(4, 5, 3.0);
        g.add_edge(5, 6, 1.0);
        g.add_edge(2, 4, 0.5);
        g.add_edge(6, 7, 2.0);
        assert_eq!(louvain(&g, 1.0), louvain(&g, 1.0));
    }
}
