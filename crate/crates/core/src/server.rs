//! Server-side execution: sample-weighted aggregation, pseudo-prototype
//! reconstruction by gradient matching, the buffer KNN graph and
//! trajectory-weighted knowledge transfer into the global model.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::client::{ClientUpdate, EvolutionTrajectory};
use crate::encoding::{EncodingNet, PrototypeGradientPacket};
use crate::error::{Error, Result};
use crate::gnn::{self, GnnParams, Mode};
use crate::numerics::{
    log_softmax_rows, AdamConfig, AdamState, Lbfgs, LbfgsConfig, Neighborhoods, SeedStream, Tape, Tensor,
    LOG_FLOOR,
};

/// `Θ^g = Σ_k (N_k/N)·Θ^k`, accumulated in ascending client-id order.
///
/// Evaluated as `Θ^{first} + Σ_k (N_k/N)(Θ^k − Θ^{first})`, which is the same
/// weighted mean but returns an input bit-for-bit when all inputs agree.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<GnnParams> {
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client);
    let first = *order
        .first()
        .ok_or_else(|| Error::Invalid("aggregation needs at least one update".into()))?;
    if let Some(u) = order.iter().find(|u| u.train_count == 0) {
        return Err(Error::Invalid(format!("client {} reports no training nodes", u.client)));
    }
    if let Some(u) = order.iter().find(|u| u.params.arch() != first.params.arch()) {
        return Err(Error::shape(
            "aggregate",
            format!("client {} architecture differs from client {}", u.client, first.client),
        ));
    }
    let total: usize = order.iter().map(|u| u.train_count).sum();
    let mut out = first.params.clone();
    for u in &order[1..] {
        let w = u.train_count as f64 / total as f64;
        for ((o, t), base) in out
            .tensors_mut()
            .iter_mut()
            .zip(u.params.tensors())
            .zip(first.params.tensors())
        {
            for ((ov, &tv), &bv) in o.data_mut().iter_mut().zip(t.data()).zip(base.data()) {
                *ov += w * (tv - bv);
            }
        }
    }
    Ok(out)
}

/// Class position carried by a packet: the smallest entry of the final bias
/// gradient (`softmax − onehot` is negative only at the true class).
pub fn infer_class(packet: &PrototypeGradientPacket) -> usize {
    let g = packet.final_bias_gradient();
    let mut best = 0;
    for (i, &v) in g.iter().enumerate() {
        if v < g[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReconOptimizer {
    #[default]
    Adam,
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub iterations: usize,
    pub optimizer: ReconOptimizer,
    /// Adam step size; ignored by L-BFGS.
    pub lr: f64,
    /// Stop once the matching loss falls to this value.
    pub tolerance: f64,
    /// Hold hidden encoding units to the on/off pattern revealed by the
    /// packet while descending. The exact loss still selects the returned
    /// iterate.
    pub use_packet_pattern: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            optimizer: ReconOptimizer::Adam,
            lr: 0.1,
            tolerance: 1e-12,
            use_packet_pattern: true,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Invalid("reconstruction budget must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Invalid("reconstruction lr and tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconstruction {
    pub prototype: Vec<f64>,
    pub class: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Searches for a vector whose encoding gradient matches `packet`, starting
/// from standard Gaussian noise. Returns the best iterate. A non-finite loss
/// restarts once from a fresh draw.
pub fn reconstruct(
    packet: &PrototypeGradientPacket,
    net: &EncodingNet,
    cfg: &ReconConfig,
    seed: SeedStream,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let class = infer_class(packet);
    match reconstruct_attempt(packet, net, cfg, class, seed.rng("attempt/0")) {
        Err(Error::Numerical(msg)) => {
            log::warn!("reconstruction diverged ({msg}); restarting once");
            reconstruct_attempt(packet, net, cfg, class, seed.rng("attempt/1"))
        }
        other => other,
    }
}

fn reconstruct_attempt(
    packet: &PrototypeGradientPacket,
    net: &EncodingNet,
    cfg: &ReconConfig,
    class: usize,
    mut rng: impl Rng,
) -> Result<Reconstruction> {
    let x0: Vec<f64> = (0..net.input_dim()).map(|_| rng.sample(StandardNormal)).collect();
    let layers = &packet.layers;
    let pattern = if cfg.use_packet_pattern {
        Some(net.activation_pattern(layers)?)
    } else {
        None
    };
    let pattern = pattern.as_deref();
    let initial_loss = net.matching_value(layers, class, &x0)?;
    let mut best = (x0.clone(), initial_loss);
    match cfg.optimizer {
        ReconOptimizer::Adam => {
            let mut x = vec![Tensor::row_vector(x0)?];
            let mut adam = AdamState::new(x.iter(), AdamConfig::default());
            for _ in 0..cfg.iterations {
                if best.1 <= cfg.tolerance {
                    break;
                }
                let (_, g) = net.matching_loss_with(layers, class, x[0].data(), pattern)?;
                adam.step(&mut x, &[Tensor::row_vector(g)?], cfg.lr, 0.0)?;
                let f = net.matching_value(layers, class, x[0].data())?;
                if f < best.1 {
                    best = (x[0].data().to_vec(), f);
                }
            }
        }
        ReconOptimizer::Lbfgs => {
            let solver = Lbfgs::new(LbfgsConfig {
                max_iter: cfg.iterations,
                tolerance: cfg.tolerance,
                ..Default::default()
            });
            let (x, _) = solver.minimize(x0, |x| net.matching_loss_with(layers, class, x, pattern))?;
            let f = net.matching_value(layers, class, &x)?;
            if f < best.1 {
                best = (x, f);
            }
        }
    }
    let (prototype, final_loss) = best;
    if !final_loss.is_finite() {
        return Err(Error::Numerical("reconstruction ended with a non-finite loss".into()));
    }
    Ok(Reconstruction {
        prototype,
        class,
        initial_loss,
        final_loss,
    })
}

/// One reconstructed pseudo prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRow {
    pub features: Vec<f64>,
    pub label: usize,
    pub client: usize,
    pub task: usize,
}

/// Append-only store of pseudo prototypes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalBuffer {
    rows: Vec<GlobalRow>,
}

impl GlobalBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: GlobalRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[GlobalRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn features(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.rows.iter().map(|r| r.features.clone()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }
}

/// KNN selection over `sigmoid(X·Xᵀ)`: for each row `u`, the `k` columns with
/// the highest score, ties to the lower index. The row itself is a candidate
/// unless `exclude_self`. `k` is capped at the number of candidates.
pub fn knn_selection(features: &Tensor, k: usize, exclude_self: bool) -> Result<Vec<Vec<usize>>> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::Invalid("buffer graph needs at least one row".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let candidates = if exclude_self { n - 1 } else { n };
    if k > candidates {
        log::warn!("k = {k} exceeds {candidates} candidates; capping");
    }
    let k = k.min(candidates);
    let scores = features.matmul_t(features)?.map(|v| 1.0 / (1.0 + (-v).exp()));
    Ok((0..n)
        .map(|u| {
            let mut cols: Vec<usize> = (0..n).filter(|&v| !(exclude_self && v == u)).collect();
            let row = scores.row(u);
            cols.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            cols.truncate(k);
            cols
        })
        .collect())
}

/// Directed buffer graph: row `u` aggregates from its selected columns (and
/// from itself, as every model adds self-loops).
pub fn build_buffer_graph(features: &Tensor, k: usize, exclude_self: bool) -> Result<Neighborhoods> {
    let sel = knn_selection(features, k, exclude_self)?;
    let pairs: Vec<(usize, usize)> = sel
        .iter()
        .enumerate()
        .flat_map(|(u, cols)| cols.iter().map(move |&v| (u, v)))
        .collect();
    Neighborhoods::from_pairs(features.rows(), &pairs)
}

/// `w[k][c] = q^k(c) / Σ_j q^j(c)`; classes with zero total mass get zero
/// weight for every client.
pub fn transfer_weights(trajectories: &[&EvolutionTrajectory], num_classes: usize) -> Result<Vec<Vec<f64>>> {
    if let Some(t) = trajectories.iter().find(|t| t.q.len() != num_classes) {
        return Err(Error::shape(
            "transfer weights",
            format!("trajectory of length {} for {num_classes} classes", t.q.len()),
        ));
    }
    let totals: Vec<f64> = (0..num_classes)
        .map(|c| trajectories.iter().map(|t| t.q[c]).sum())
        .collect();
    Ok(trajectories
        .iter()
        .map(|t| {
            t.q.iter()
                .zip(&totals)
                .map(|(&q, &s)| if s > 0.0 { q / s } else { 0.0 })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub epochs: usize,
    /// Adam step size. The optimizer restarts every round, so its first steps
    /// move each weight by about `lr` whatever the gradient scale.
    pub lr: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self { epochs: 5, lr: 1e-3 }
    }
}

/// Trains only the global model to agree with the frozen local models on the
/// buffer graph. Per buffer row `i` of class `c` the objective is
/// `Σ_k w[k][c]·KL(ŷ^g_i ‖ ŷ^k_i)`, all models in eval mode.
///
/// `teachers` pairs each local model with its trajectory, in client order.
/// Returns the trained parameters and the objective before each epoch.
pub fn knowledge_transfer(
    global: &GnnParams,
    teachers: &[(&GnnParams, &EvolutionTrajectory)],
    buffer: &GlobalBuffer,
    nb: &Arc<Neighborhoods>,
    cfg: &TransferConfig,
) -> Result<(GnnParams, Vec<f64>)> {
    if buffer.is_empty() {
        return Err(Error::Invalid("knowledge transfer needs a non-empty buffer".into()));
    }
    let c = global.arch().num_classes;
    let x = buffer.features()?;
    let labels = buffer.labels();
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Invalid(format!("buffer label {y} outside {c} classes")));
    }
    let trajectories: Vec<&EvolutionTrajectory> = teachers.iter().map(|(_, t)| *t).collect();
    let weights = transfer_weights(&trajectories, c)?;

    let n = x.rows();
    let mut targets = Tensor::zeros(&[n, c]);
    let mut row_weights = vec![0.0; n];
    let floor = LOG_FLOOR.ln();
    for ((params, _), w) in teachers.iter().zip(&weights) {
        if params.arch() != global.arch() {
            return Err(Error::shape("knowledge transfer", "teacher architecture differs"));
        }
        let (_, logits) = gnn::forward(params, &x, nb, Mode::Eval, 0)?;
        let logq = log_softmax_rows(&logits);
        for (i, &y) in labels.iter().enumerate() {
            let wk = w[y];
            if wk == 0.0 {
                continue;
            }
            row_weights[i] += wk;
            for (t, &l) in targets.row_mut(i).iter_mut().zip(logq.row(i)) {
                *t += wk * l.max(floor);
            }
        }
    }

    let mut current = global.clone();
    let mut adam = AdamState::new(current.tensors(), AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut rng = SeedStream::new(0).rng("unused");
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let vars = current.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = gnn::forward_on_tape(&mut tape, current.arch(), &vars, xv, nb, Mode::Eval, &mut rng)?;
        let loss = tape.weighted_kl(out.logits, row_weights.clone(), targets.clone())?;
        losses.push(tape.scalar(loss));
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(current.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        adam.step(current.tensors_mut(), &grads, cfg.lr, 0.0)?;
    }
    Ok((current, losses))
}
