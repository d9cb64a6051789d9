//! Graph data model, JSON ingestion, synthetic block-model generation and
//! adjacency helpers.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Neighborhoods, SeedStream, Tensor};

/// Label value for nodes without a class.
pub const UNLABELED: i64 = -1;

/// Undirected attributed graph. Edges are stored once as `(u, v)` with
/// `u < v`, sorted, without self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Tensor,
    labels: Vec<i64>,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Validates and canonicalizes: reversed and duplicate edges collapse,
    /// self-loops are dropped.
    pub fn new(features: Tensor, labels: Vec<i64>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::Invalid(format!(
                "{} labels for {n} feature rows",
                labels.len()
            )));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l < UNLABELED) {
            return Err(Error::Invalid(format!("labels[{i}] = {l} is below -1")));
        }
        if !features.is_finite() {
            return Err(Error::Invalid("non-finite feature value".into()));
        }
        let mut canon = BTreeSet::new();
        for (i, &(u, v)) in edges.iter().enumerate() {
            if u >= n || v >= n {
                return Err(Error::Invalid(format!(
                    "edges[{i}] = [{u}, {v}] has an endpoint outside [0, {n})"
                )));
            }
            if u != v {
                canon.insert((u.min(v), u.max(v)));
            }
        }
        Ok(Self {
            features,
            labels,
            edges: canon.into_iter().collect(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Class count inferred as `max label + 1` (0 when nothing is labeled).
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize)
    }

    pub fn neighborhoods(&self) -> Neighborhoods {
        Neighborhoods::undirected(self.node_count(), &self.edges)
            .expect("stored edges are in range")
    }

    /// Adjacency lists (without self).
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    num_nodes: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<i64>,
    edges: Vec<[i64; 2]>,
}

/// Reads the JSON graph format
/// (`num_nodes`, `features`, `labels`, `edges`).
pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |detail: String| Error::Parse {
        path: path.to_path_buf(),
        detail,
    };
    let file: GraphFile = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    let n = file.num_nodes;
    if n == 0 {
        return Err(parse_err("num_nodes must be positive".into()));
    }
    if file.features.len() != n {
        return Err(parse_err(format!(
            "features has {} rows, num_nodes is {n}",
            file.features.len()
        )));
    }
    let dim = file.features[0].len();
    if dim == 0 {
        return Err(parse_err("features[0] is empty".into()));
    }
    if let Some((i, row)) = file.features.iter().enumerate().find(|(_, r)| r.len() != dim) {
        return Err(parse_err(format!(
            "features[{i}] has {} values, expected {dim}",
            row.len()
        )));
    }
    if file.labels.len() != n {
        return Err(parse_err(format!(
            "labels has {} entries, num_nodes is {n}",
            file.labels.len()
        )));
    }
    if let Some((i, l)) = file.labels.iter().enumerate().find(|(_, &l)| l < UNLABELED) {
        return Err(parse_err(format!("labels[{i}] = {l} is below -1")));
    }
    let mut edges = Vec::with_capacity(file.edges.len());
    for (i, &[u, v]) in file.edges.iter().enumerate() {
        let in_range = |x: i64| x >= 0 && (x as usize) < n;
        if !in_range(u) || !in_range(v) {
            return Err(parse_err(format!(
                "edges[{i}] = [{u}, {v}] has an endpoint outside [0, {n})"
            )));
        }
        edges.push((u as usize, v as usize));
    }
    let features = Tensor::from_rows(&file.features).map_err(|e| parse_err(e.to_string()))?;
    Graph::new(features, file.labels, edges).map_err(|e| parse_err(e.to_string()))
}

/// Writes the canonical JSON form read by [`load_graph`].
pub fn write_graph(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = GraphFile {
        num_nodes: g.node_count(),
        features: (0..g.node_count()).map(|i| g.features.row(i).to_vec()).collect(),
        labels: g.labels.clone(),
        edges: g.edges.iter().map(|&(u, v)| [u as i64, v as i64]).collect(),
    };
    let text = serde_json::to_string(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One block of a stochastic block model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbmBlock {
    pub size: usize,
    pub label: usize,
}

/// Stochastic block model with class-conditional Gaussian features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub blocks: Vec<SbmBlock>,
    pub intra_block_edge_prob: f64,
    pub inter_block_edge_prob: f64,
    pub feature_dim: usize,
    /// Euclidean distance between any two class means.
    pub class_mean_separation: f64,
    pub feature_noise_std: f64,
    pub seed: u64,
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 {
            return Err(Error::Invalid("block model needs at least 2 blocks".into()));
        }
        if self.blocks.iter().any(|b| b.size == 0) {
            return Err(Error::Invalid("empty block".into()));
        }
        for (name, p) in [
            ("intra_block_edge_prob", self.intra_block_edge_prob),
            ("inter_block_edge_prob", self.inter_block_edge_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        let classes = self.blocks.iter().map(|b| b.label).max().unwrap_or(0) + 1;
        if self.feature_dim < classes {
            return Err(Error::Invalid(format!(
                "feature_dim {} cannot hold {classes} orthogonal class means",
                self.feature_dim
            )));
        }
        if !(self.class_mean_separation > 0.0) || !(self.feature_noise_std > 0.0) {
            return Err(Error::Invalid(
                "class_mean_separation and feature_noise_std must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Samples a block-model graph. Class `c` has mean `(s/√2)·e_c`, so every
/// pair of class means is exactly `s` apart.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Graph> {
    spec.validate()?;
    let stream = SeedStream::new(spec.seed);
    let mut block_of = Vec::new();
    let mut labels = Vec::new();
    for (b, block) in spec.blocks.iter().enumerate() {
        for _ in 0..block.size {
            block_of.push(b);
            labels.push(block.label as i64);
        }
    }
    let n = block_of.len();

    let mut edge_rng = stream.rng("sbm/edges");
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block_of[u] == block_of[v] {
                spec.intra_block_edge_prob
            } else {
                spec.inter_block_edge_prob
            };
            if edge_rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let mut feat_rng = stream.rng("sbm/features");
    let offset = spec.class_mean_separation / std::f64::consts::SQRT_2;
    let dim = spec.feature_dim;
    let mut data = Vec::with_capacity(n * dim);
    for &label in &labels {
        for j in 0..dim {
            let z: f64 = feat_rng.sample(StandardNormal);
            let mean = if j == label as usize { offset } else { 0.0 };
            data.push(mean + spec.feature_noise_std * z);
        }
    }
    Graph::new(Tensor::matrix(n, dim, data)?, labels, edges)
}

/// Subgraph on `nodes`, densely re-indexed in ascending original order.
/// Returns the graph and the old→new index map.
pub fn induced_subgraph(g: &Graph, nodes: &[usize]) -> Result<(Graph, Vec<Option<usize>>)> {
    let n = g.node_count();
    if let Some(&bad) = nodes.iter().find(|&&i| i >= n) {
        return Err(Error::Invalid(format!("node {bad} outside [0, {n})")));
    }
    let keep: BTreeSet<usize> = nodes.iter().copied().collect();
    if keep.is_empty() {
        return Err(Error::Invalid("induced subgraph needs at least one node".into()));
    }
    let mut map = vec![None; n];
    for (new, &old) in keep.iter().enumerate() {
        map[old] = Some(new);
    }
    let order: Vec<usize> = keep.into_iter().collect();
    let features = g.features.select_rows(&order)?;
    let labels = order.iter().map(|&i| g.labels[i]).collect();
    let edges = g
        .edges
        .iter()
        .filter_map(|&(u, v)| Some((map[u]?, map[v]?)))
        .collect();
    Ok((Graph::new(features, labels, edges)?, map))
}

/// Dense `D̂^{-1/2} (A + I) D̂^{-1/2}` with `D̂` the degree matrix of `A + I`.
pub fn normalized_adjacency(g: &Graph) -> Tensor {
    let n = g.node_count();
    let nb = g.neighborhoods();
    let mut out = Tensor::zeros(&[n, n]);
    for t in 0..n {
        for e in nb.range(t) {
            out.set(t, nb.source(e), nb.weight(e));
        }
    }
    out
}
