//! Louvain modularity optimization (resolution 1).
//!
//! Each level sweeps nodes in a seeded random order, moving every node to the
//! neighboring community with the largest modularity gain, until a full sweep
//! gains less than [`MIN_GAIN`]. Communities are then collapsed into weighted
//! super-nodes and the process repeats on the coarser graph.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::SeedStream;

/// Sweeps and levels stop once modularity improves by less than this.
pub const MIN_GAIN: f64 = 1e-7;

/// Community id per node plus the modularity of that partition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommunityAssignment {
    pub community: Vec<usize>,
    pub modularity: f64,
}

impl CommunityAssignment {
    pub fn community_count(&self) -> usize {
        self.community.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.community_count()];
        for &c in &self.community {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Weighted symmetric graph; `adj[i]` holds `(j, A_ij)` including `j == i`.
struct LevelGraph {
    adj: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
    two_m: f64,
}

impl LevelGraph {
    fn from_graph(g: &Graph) -> Self {
        let mut adj = vec![Vec::new(); g.node_count()];
        for &(u, v) in g.edges() {
            adj[u].push((v, 1.0));
            adj[v].push((u, 1.0));
        }
        Self::finish(adj)
    }

    fn finish(adj: Vec<Vec<(usize, f64)>>) -> Self {
        let degree: Vec<f64> = adj.iter().map(|r| r.iter().map(|&(_, w)| w).sum()).collect();
        let two_m = degree.iter().sum();
        Self { adj, degree, two_m }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn modularity(&self, community: &[usize]) -> f64 {
        let k = community.iter().copied().max().map_or(0, |m| m + 1);
        let mut internal = vec![0.0; k];
        let mut total = vec![0.0; k];
        for i in 0..self.len() {
            total[community[i]] += self.degree[i];
            for &(j, w) in &self.adj[i] {
                if community[j] == community[i] {
                    internal[community[i]] += w;
                }
            }
        }
        internal
            .iter()
            .zip(&total)
            .map(|(&a, &t)| a / self.two_m - (t / self.two_m).powi(2))
            .sum()
    }

    /// Local moving phase. Returns whether any node changed community.
    fn local_moves(&self, community: &mut [usize], order: &[usize]) -> bool {
        let n = self.len();
        let mut total = vec![0.0; n];
        for i in 0..n {
            total[community[i]] += self.degree[i];
        }
        let mut moved_any = false;
        let mut links = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut quality = self.modularity(community);
        loop {
            let mut moved = false;
            for &i in order {
                let own = community[i];
                let ki = self.degree[i];
                for &(j, w) in &self.adj[i] {
                    if j == i {
                        continue;
                    }
                    let c = community[j];
                    if links[c] == 0.0 && !touched.contains(&c) {
                        touched.push(c);
                    }
                    links[c] += w;
                }
                total[own] -= ki;
                let gain = |c: usize, links: &[f64], total: &[f64]| {
                    links[c] - ki * total[c] / self.two_m
                };
                let mut best = own;
                let mut best_gain = gain(own, &links, &total);
                for &c in &touched {
                    let g = gain(c, &links, &total);
                    if g > best_gain + 1e-12 {
                        best = c;
                        best_gain = g;
                    }
                }
                total[best] += ki;
                if best != own {
                    community[i] = best;
                    moved = true;
                }
                for &c in &touched {
                    links[c] = 0.0;
                }
                links[own] = 0.0;
                touched.clear();
            }
            if !moved {
                break;
            }
            moved_any = true;
            let next = self.modularity(community);
            let improvement = next - quality;
            quality = next;
            if improvement < MIN_GAIN {
                break;
            }
        }
        moved_any
    }

    /// Collapses communities (already dense) into super-nodes.
    fn aggregate(&self, community: &[usize], k: usize) -> LevelGraph {
        let mut rows: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); k];
        for i in 0..self.len() {
            for &(j, w) in &self.adj[i] {
                *rows[community[i]].entry(community[j]).or_insert(0.0) += w;
            }
        }
        Self::finish(rows.into_iter().map(|r| r.into_iter().collect()).collect())
    }
}

/// Renumbers labels densely in order of first appearance.
fn densify(labels: &mut [usize]) -> usize {
    let mut map = std::collections::HashMap::new();
    for l in labels.iter_mut() {
        let next = map.len();
        *l = *map.entry(*l).or_insert(next);
    }
    map.len()
}

/// Modularity of `community` on `g`, computed from scratch.
pub fn modularity(g: &Graph, community: &[usize]) -> f64 {
    LevelGraph::from_graph(g).modularity(community)
}

/// Multi-level Louvain partitioning of `g`.
pub fn louvain(g: &Graph, seed: u64) -> Result<CommunityAssignment> {
    if g.edges().is_empty() {
        return Err(Error::Partition(
            "louvain needs at least one edge; modularity is undefined otherwise".into(),
        ));
    }
    let stream = SeedStream::new(seed).fork("louvain");
    let mut level = LevelGraph::from_graph(g);
    let mut node_community: Vec<usize> = (0..g.node_count()).collect();
    let mut quality = level.modularity(&node_community);

    for depth in 0.. {
        let n = level.len();
        let mut community: Vec<usize> = (0..n).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream.rng(&format!("level/{depth}")));
        if !level.local_moves(&mut community, &order) {
            break;
        }
        let k = densify(&mut community);
        for c in node_community.iter_mut() {
            *c = community[*c];
        }
        let next_level = level.aggregate(&community, k);
        let next_quality = next_level.modularity(&(0..k).collect::<Vec<_>>());
        let improvement = next_quality - quality;
        level = next_level;
        quality = next_quality;
        if improvement < MIN_GAIN || k == n {
            break;
        }
    }
    densify(&mut node_community);
    let modularity = modularity(g, &node_community);
    Ok(CommunityAssignment {
        community: node_community,
        modularity,
    })
}

/// Distributes communities over `k` clients: largest community first, each
/// into the client currently holding the fewest nodes (lowest index on ties).
/// Returns ascending node lists per client.
pub fn assign_clients(assignment: &CommunityAssignment, k: usize) -> Result<Vec<Vec<usize>>> {
    let count = assignment.community_count();
    if k == 0 {
        return Err(Error::Partition("client count must be positive".into()));
    }
    if count < k {
        return Err(Error::Partition(format!(
            "{count} communities cannot cover {k} clients; use fewer clients or another seed"
        )));
    }
    let sizes = assignment.sizes();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut owner = vec![0; count];
    let mut load = vec![0usize; k];
    for c in order {
        let target = (0..k).min_by_key(|&i| (load[i], i)).expect("k > 0");
        owner[c] = target;
        load[target] += sizes[c];
    }
    let mut clients = vec![Vec::new(); k];
    for (node, &c) in assignment.community.iter().enumerate() {
        clients[owner[c]].push(node);
    }
    Ok(clients)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(Tensor::zeros(&[n, 1]), vec![0; n], edges.to_vec()).unwrap()
    }

    fn clique(offset: usize, size: usize) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for i in 0..size {
            for j in (i + 1)..size {
                e.push((offset + i, offset + j));
            }
        }
        e
    }

    #[test]
    fn two_cliques_split() {
        let mut e = clique(0, 4);
        e.extend(clique(4, 4));
        let g = graph(8, &e);
        let a = louvain(&g, 1).unwrap();
        assert_eq!(a.community_count(), 2);
        assert!(a.community[..4].iter().all(|&c| c == a.community[0]));
        assert!(a.community[4..].iter().all(|&c| c == a.community[4]));
        assert!((a.modularity - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_clique_stays_whole() {
        let g = graph(5, &clique(0, 5));
        assert_eq!(louvain(&g, 9).unwrap().community_count(), 1);
    }

    #[test]
    fn deterministic_and_consistent() {
        let mut e = clique(0, 5);
        e.extend(clique(5, 4));
        e.push((2, 7));
        e.push((9, 10));
        let g = graph(11, &e);
        let a = louvain(&g, 42).unwrap();
        assert_eq!(a, louvain(&g, 42).unwrap());
        assert!((a.modularity - modularity(&g, &a.community)).abs() < 1e-9);
    }

    #[test]
    fn edgeless_graph_errors() {
        assert!(louvain(&graph(3, &[]), 0).is_err());
    }

    #[test]
    fn assignment_greedy_trace() {
        // sizes 5,3,2,2
        let mut community = vec![0; 5];
        community.extend(vec![1; 3]);
        community.extend(vec![2; 2]);
        community.extend(vec![3; 2]);
        let a = CommunityAssignment {
            community,
            modularity: 0.0,
        };
        let clients = assign_clients(&a, 2).unwrap();
        assert_eq!(clients[0].len(), 7);
        assert_eq!(clients[1].len(), 5);
        assert!(assign_clients(&a, 5).is_err());

        let even = CommunityAssignment {
            community: vec![0, 0, 1, 1, 2, 2],
            modularity: 0.0,
        };
        let clients = assign_clients(&even, 3).unwrap();
        assert_eq!(clients, vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
    }
}
