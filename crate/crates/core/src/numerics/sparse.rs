use crate::error::{Error, Result};

/// Message-passing structure over `n` nodes, stored by receiving node.
///
/// Every node receives from itself (self-loops are added here, never stored
/// in graph data). Each entry also carries its symmetric-normalized
/// propagation weight `1 / sqrt(d_target · d_source)`, where `d` counts the
/// entries of a node's own row, so convolution layers can reuse the
/// structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    n: usize,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    weights: Vec<f64>,
}

impl Neighborhoods {
    /// Builds from `(target, source)` pairs. Duplicates collapse.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(t, s) in pairs {
            if t >= n || s >= n {
                return Err(Error::Invalid(format!(
                    "pair ({t}, {s}) out of range for {n} nodes"
                )));
            }
            rows[t].push(s);
        }
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
        }
        let degree: Vec<f64> = rows.iter().map(|r| r.len() as f64).collect();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut sources = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for (t, r) in rows.iter().enumerate() {
            for &s in r {
                sources.push(s);
                weights.push(1.0 / (degree[t] * degree[s]).sqrt());
            }
            offsets.push(sources.len());
        }
        Ok(Self {
            n,
            offsets,
            sources,
            weights,
        })
    }

    /// Symmetric structure from an undirected edge list.
    pub fn undirected(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let pairs: Vec<_> = edges.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect();
        Self::from_pairs(n, &pairs)
    }

    /// Self-loops only: every node is processed in isolation.
    pub fn identity(n: usize) -> Self {
        Self::from_pairs(n, &[]).expect("identity structure is always valid")
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn entry_count(&self) -> usize {
        self.sources.len()
    }

    /// Entry range for receiving node `t`.
    pub fn range(&self, t: usize) -> std::ops::Range<usize> {
        self.offsets[t]..self.offsets[t + 1]
    }

    pub fn source(&self, e: usize) -> usize {
        self.sources[e]
    }

    pub fn weight(&self, e: usize) -> f64 {
        self.weights[e]
    }

    pub fn neighbors(&self, t: usize) -> &[usize] {
        &self.sources[self.range(t)]
    }
}
