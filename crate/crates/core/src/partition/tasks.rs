//! Class-incremental task construction for one client subgraph.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::{Neighborhoods, SeedStream, Tensor};

/// How a client orders its classes before grouping them into tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrder {
    /// Descending local label frequency, ties by class id.
    #[default]
    ByFrequency,
    /// Fixed global order; classes absent from the client are skipped.
    Permutation(Vec<usize>),
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.2,
            val: 0.4,
            test: 0.4,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&r| r < 0.0 || !r.is_finite()) {
            return Err(Error::Invalid(format!("negative split ratio in {parts:?}")));
        }
        let s: f64 = parts.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("split ratios sum to {s}, not 1")));
        }
        Ok(())
    }
}

/// Disjoint node masks over one task's nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Train,
    Val,
    Test,
}

impl SplitMasks {
    pub fn get(&self, kind: MaskKind) -> &[bool] {
        match kind {
            MaskKind::Train => &self.train,
            MaskKind::Val => &self.val,
            MaskKind::Test => &self.test,
        }
    }

    pub fn count(&self, kind: MaskKind) -> usize {
        self.get(kind).iter().filter(|&&b| b).count()
    }

    pub fn indices(&self, kind: MaskKind) -> Vec<usize> {
        self.get(kind)
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// One class-incremental task of one client.
///
/// Node-level data is stored task-locally: row `i` of `features` is client
/// node `nodes[i]`, and `labels[i]` is its class position in the client's
/// cumulative ordering.
#[derive(Debug, Clone)]
pub struct TaskView {
    pub index: usize,
    /// Original class ids, in order.
    pub classes: Vec<usize>,
    pub nodes: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub masks: SplitMasks,
    /// Original class id → position in the client's cumulative ordering.
    pub relabel: BTreeMap<usize, usize>,
    edges: Vec<(usize, usize)>,
    neighborhoods: Arc<Neighborhoods>,
}

impl TaskView {
    /// Assembles a view from task-local data, validating sizes and labels.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        index: usize,
        classes: Vec<usize>,
        nodes: Vec<usize>,
        features: Tensor,
        labels: Vec<usize>,
        masks: SplitMasks,
        relabel: BTreeMap<usize, usize>,
        edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let n = nodes.len();
        if features.rows() != n
            || labels.len() != n
            || masks.train.len() != n
            || masks.val.len() != n
            || masks.test.len() != n
        {
            return Err(Error::shape("task view", "node-level data lengths differ"));
        }
        if let Some(c) = classes.iter().find(|c| !relabel.contains_key(c)) {
            return Err(Error::Invalid(format!("class {c} has no position")));
        }
        let neighborhoods = Arc::new(Neighborhoods::undirected(n, &edges)?);
        Ok(Self {
            index,
            classes,
            nodes,
            features,
            labels,
            masks,
            relabel,
            edges,
            neighborhoods,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Intra-task edges in task-local indices.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn set_edges(&mut self, edges: Vec<(usize, usize)>) -> Result<()> {
        self.neighborhoods = Arc::new(Neighborhoods::undirected(self.node_count(), &edges)?);
        self.edges = edges;
        Ok(())
    }

    pub fn neighborhoods(&self) -> &Arc<Neighborhoods> {
        &self.neighborhoods
    }

    /// Class positions introduced by this task.
    pub fn positions(&self) -> Vec<usize> {
        self.classes.iter().map(|c| self.relabel[c]).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.masks.indices(MaskKind::Train)
    }
}

/// Task sequence of one client.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client: usize,
    /// The `c × M` retained classes in task order.
    pub class_order: Vec<usize>,
    pub tasks: Vec<TaskView>,
}

impl ClientDataset {
    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }
}

/// Stratified split: per class, labeled nodes are shuffled and cut at
/// `floor(train·n)`, then `floor(val·n)`, the rest is test. A class with at
/// least 3 nodes always gets one training node.
pub fn split_train_val_test(
    labels: &[usize],
    ratios: SplitRatios,
    rng: &mut impl rand::Rng,
) -> Result<SplitMasks> {
    ratios.validate()?;
    let n = labels.len();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut masks = SplitMasks {
        train: vec![false; n],
        val: vec![false; n],
        test: vec![false; n],
    };
    for (_, mut members) in by_class {
        members.shuffle(rng);
        let m = members.len();
        let mut n_train = (ratios.train * m as f64 + 1e-9).floor() as usize;
        let mut n_val = (ratios.val * m as f64 + 1e-9).floor() as usize;
        if n_train == 0 && m >= 3 && ratios.train > 0.0 {
            n_train = 1;
        }
        n_train = n_train.min(m);
        n_val = n_val.min(m - n_train);
        for (k, &i) in members.iter().enumerate() {
            if k < n_train {
                masks.train[i] = true;
            } else if k < n_train + n_val {
                masks.val[i] = true;
            } else {
                masks.test[i] = true;
            }
        }
    }
    Ok(masks)
}

/// Groups the client's first `c × M` classes into `M` consecutive tasks.
/// Nodes of surplus classes and unlabeled nodes are dropped, as are
/// inter-task edges.
pub fn split_tasks(
    client_graph: &Graph,
    client: usize,
    classes_per_task: usize,
    task_count: usize,
    order: &ClassOrder,
    ratios: SplitRatios,
    seed: u64,
) -> Result<ClientDataset> {
    if classes_per_task == 0 || task_count == 0 {
        return Err(Error::Invalid("classes per task and task count must be positive".into()));
    }
    let needed = classes_per_task * task_count;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in client_graph.labels() {
        if l >= 0 {
            *counts.entry(l as usize).or_default() += 1;
        }
    }
    let ranked: Vec<usize> = match order {
        ClassOrder::ByFrequency => {
            let mut v: Vec<(usize, usize)> = counts.iter().map(|(&c, &n)| (c, n)).collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            v.into_iter().map(|(c, _)| c).collect()
        }
        ClassOrder::Permutation(perm) => {
            perm.iter().copied().filter(|c| counts.contains_key(c)).collect()
        }
    };
    if ranked.len() < needed {
        return Err(Error::Partition(format!(
            "client {client} has {} usable classes, needs {needed} ({classes_per_task} per task × {task_count} tasks)",
            ranked.len()
        )));
    }
    let class_order: Vec<usize> = ranked[..needed].to_vec();
    let relabel: BTreeMap<usize, usize> =
        class_order.iter().enumerate().map(|(p, &c)| (c, p)).collect();

    let stream = SeedStream::new(seed).fork(&format!("split/client/{client}"));
    let mut tasks = Vec::with_capacity(task_count);
    for t in 0..task_count {
        let classes: Vec<usize> = class_order[t * classes_per_task..(t + 1) * classes_per_task].to_vec();
        let class_set: BTreeSet<i64> = classes.iter().map(|&c| c as i64).collect();
        let nodes: Vec<usize> = client_graph
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, l)| class_set.contains(l))
            .map(|(i, _)| i)
            .collect();
        let mut local = vec![None; client_graph.node_count()];
        for (new, &old) in nodes.iter().enumerate() {
            local[old] = Some(new);
        }
        let edges: Vec<(usize, usize)> = client_graph
            .edges()
            .iter()
            .filter_map(|&(u, v)| Some((local[u]?, local[v]?)))
            .collect();
        let labels: Vec<usize> = nodes
            .iter()
            .map(|&i| relabel[&(client_graph.labels()[i] as usize)])
            .collect();
        let features = client_graph.features().select_rows(&nodes)?;
        let masks = split_train_val_test(&labels, ratios, &mut stream.rng(&format!("task/{t}")))?;
        let task_relabel = classes.iter().map(|c| (*c, relabel[c])).collect();
        let neighborhoods = Arc::new(Neighborhoods::undirected(nodes.len(), &edges)?);
        tasks.push(TaskView {
            index: t,
            classes,
            nodes,
            features,
            labels,
            masks,
            relabel: task_relabel,
            edges,
            neighborhoods,
        });
    }
    Ok(ClientDataset {
        client,
        class_order,
        tasks,
    })
}
