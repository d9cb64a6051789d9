//! Client-side execution: replay-augmented local training, experience-node
//! selection by local-global coverage, prototype-gradient encoding and the
//! evolution trajectory.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{EncodingNet, PrototypeGradientPacket};
use crate::error::{Error, Result};
use crate::gnn::{self, GnnParams, Mode, TrainHyper};
use crate::numerics::{pairwise_euclidean, AdamConfig, AdamState, Neighborhoods, SeedStream, Tape, Tensor, Var};
use crate::partition::{MaskKind, TaskView};

/// Trade-off factors of the client procedure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientHyper {
    /// Weight of local embeddings against global ones.
    pub alpha: f64,
    /// Weight of the new-task loss against the replay loss.
    pub beta: f64,
    /// Decay of the evolution trajectory.
    pub phi: f64,
    /// Coverage radius factor.
    pub epsilon: f64,
    /// Replayed nodes per class.
    pub buffer_per_class: usize,
}

impl Default for ClientHyper {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            phi: 0.5,
            epsilon: 0.1,
            buffer_per_class: 1,
        }
    }
}

impl ClientHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("phi", self.phi)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Invalid(format!("epsilon = {} must be positive", self.epsilon)));
        }
        if self.buffer_per_class == 0 {
            return Err(Error::Invalid("buffer_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

/// One replayed node: features only, no topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub features: Vec<f64>,
    pub label: usize,
    pub task: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperienceBuffer {
    entries: Vec<BufferEntry>,
}

impl ExperienceBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = BufferEntry>) {
        self.entries.extend(entries);
    }

    pub fn features(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.entries.iter().map(|e| e.features.clone()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

/// Decayed cumulative label distribution of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionTrajectory {
    pub q: Vec<f64>,
    pub task: usize,
}

/// `q_t = φ·q_{t−1} + p_t`, where `p_t` is the L1-normalized count of
/// training labels in `task`.
pub fn update_trajectory(
    prev: Option<&EvolutionTrajectory>,
    task: &TaskView,
    num_classes: usize,
    phi: f64,
) -> Result<EvolutionTrajectory> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::Invalid(format!("phi = {phi} outside [0, 1]")));
    }
    let mut q = match prev {
        Some(p) if p.q.len() != num_classes => {
            return Err(Error::shape("trajectory", "class count changed between tasks"));
        }
        Some(p) => p.q.iter().map(|v| phi * v).collect(),
        None => vec![0.0; num_classes],
    };
    let train = task.train_indices();
    if !train.is_empty() {
        let w = 1.0 / train.len() as f64;
        for i in train {
            let y = task.labels[i];
            if y >= num_classes {
                return Err(Error::Invalid(format!("label {y} outside {num_classes} classes")));
            }
            q[y] += w;
        }
    }
    Ok(EvolutionTrajectory { q, task: task.index })
}

/// Records `β·L_new + (1−β)·L_old` on the tape. The replay term predicts
/// each buffer node in isolation and is omitted entirely when the buffer is
/// empty.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss_on_tape(
    tape: &mut Tape,
    params: &GnnParams,
    vars: &[Var],
    task: &TaskView,
    buffer: &ExperienceBuffer,
    beta: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let x = tape.leaf(task.features.clone());
    let out = gnn::forward_on_tape(tape, params.arch(), vars, x, task.neighborhoods(), mode, rng)?;
    let new = gnn::cross_entropy_on_tape(tape, out.logits, &task.labels, task.masks.get(MaskKind::Train))?;
    let new = tape.scale(new, beta);
    if buffer.is_empty() {
        return Ok(new);
    }
    let xb = tape.leaf(buffer.features()?);
    let ident = Arc::new(Neighborhoods::identity(buffer.len()));
    let out = gnn::forward_on_tape(tape, params.arch(), vars, xb, &ident, mode, rng)?;
    let old = gnn::cross_entropy_on_tape(tape, out.logits, &buffer.labels(), &vec![true; buffer.len()])?;
    let old = tape.scale(old, 1.0 - beta);
    tape.add(new, old)
}

/// Eval-mode value of [`combined_loss_on_tape`].
pub fn combined_loss(params: &GnnParams, task: &TaskView, buffer: &ExperienceBuffer, beta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let mut rng = SeedStream::new(0).rng("unused");
    let loss = combined_loss_on_tape(&mut tape, params, &vars, task, buffer, beta, Mode::Eval, &mut rng)?;
    Ok(tape.scalar(loss))
}

/// `Z = α·H + (1−α)·H^g` from eval-mode hidden embeddings.
pub fn local_global_embeddings(
    task: &TaskView,
    local: &GnnParams,
    global: &GnnParams,
    alpha: f64,
) -> Result<Tensor> {
    if local.arch() != global.arch() {
        return Err(Error::shape("local-global embeddings", "architectures differ"));
    }
    let (h, _) = gnn::forward(local, &task.features, task.neighborhoods(), Mode::Eval, 0)?;
    let (hg, _) = gnn::forward(global, &task.features, task.neighborhoods(), Mode::Eval, 0)?;
    h.zip_map(&hg, |a, b| alpha * a + (1.0 - alpha) * b)
}

/// Local-global coverage of every masked node; unmasked nodes get 0.
///
/// The radius of `v_i` is `ε·E(v_i)`, with `E(v_i)` the mean distance to the
/// other same-class masked nodes (self excluded so it does not shrink the
/// radius). The count includes `v_i` itself. A zero radius, as for a class
/// with a single node, gives a count of 1.
pub fn coverage(z: &Tensor, labels: &[usize], mask: &[bool], epsilon: f64) -> Result<Vec<usize>> {
    let n = z.rows();
    if labels.len() != n || mask.len() != n {
        return Err(Error::shape("coverage", "labels and mask must match embedding rows"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("epsilon = {epsilon} must be positive")));
    }
    let mut counts = vec![0; n];
    let mut classes: Vec<usize> = (0..n).filter(|&i| mask[i]).map(|i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let members: Vec<usize> = (0..n).filter(|&i| mask[i] && labels[i] == c).collect();
        let zc = z.select_rows(&members)?;
        let d = pairwise_euclidean(&zc, &zc)?;
        let m = members.len();
        for (a, &node) in members.iter().enumerate() {
            let row = d.row(a);
            let mean = if m > 1 {
                row.iter().sum::<f64>() / (m - 1) as f64
            } else {
                0.0
            };
            let radius = epsilon * mean;
            counts[node] = if radius > 0.0 {
                row.iter().filter(|&&v| v < radius).count()
            } else {
                1
            };
        }
    }
    Ok(counts)
}

/// Picks, per class of the task, the `b` training nodes with the highest
/// coverage (lower index wins ties).
pub fn select_experience_nodes(
    task: &TaskView,
    local: &GnnParams,
    global: &GnnParams,
    hyper: &ClientHyper,
) -> Result<Vec<BufferEntry>> {
    let z = local_global_embeddings(task, local, global, hyper.alpha)?;
    let mask = task.masks.get(MaskKind::Train);
    let cov = coverage(&z, &task.labels, mask, hyper.epsilon)?;
    let mut out = Vec::new();
    for class in task.positions() {
        let mut members: Vec<usize> = (0..task.node_count())
            .filter(|&i| mask[i] && task.labels[i] == class)
            .collect();
        if members.len() < hyper.buffer_per_class {
            log::warn!(
                "task {} class {class}: {} training nodes, buffer wants {}",
                task.index,
                members.len(),
                hyper.buffer_per_class
            );
        }
        members.sort_by(|&a, &b| cov[b].cmp(&cov[a]).then(a.cmp(&b)));
        out.extend(members.into_iter().take(hyper.buffer_per_class).map(|i| BufferEntry {
            features: task.features.row(i).to_vec(),
            label: class,
            task: task.index,
        }));
    }
    Ok(out)
}

/// One packet per task class with at least one training node: the encoding
/// gradient of the class's mean training feature vector.
pub fn encode_prototypes(task: &TaskView, net: &EncodingNet, client: usize) -> Result<Vec<PrototypeGradientPacket>> {
    let train = task.train_indices();
    let dim = task.features.cols();
    let mut packets = Vec::new();
    for class in task.positions() {
        let members: Vec<usize> = train.iter().copied().filter(|&i| task.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let mut proto = vec![0.0; dim];
        for &i in &members {
            for (p, v) in proto.iter_mut().zip(task.features.row(i)) {
                *p += v;
            }
        }
        let inv = 1.0 / members.len() as f64;
        proto.iter_mut().for_each(|p| *p *= inv);
        packets.push(net.packet(&proto, class, client, task.index)?);
    }
    Ok(packets)
}

/// Which optional client procedures a method runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientOptions {
    /// Experience buffer and replay loss.
    pub replay: bool,
    /// Prototype packets and trajectory for server-side refinement.
    pub encode: bool,
}

/// Persistent state of one client across rounds and tasks.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub params: GnnParams,
    pub adam: AdamState,
    pub buffer: ExperienceBuffer,
    pub trajectory: Option<EvolutionTrajectory>,
}

impl ClientState {
    pub fn new(id: usize, params: GnnParams) -> Self {
        let adam = AdamState::new(params.tensors(), AdamConfig::default());
        Self {
            id,
            params,
            adam,
            buffer: ExperienceBuffer::new(),
            trajectory: None,
        }
    }
}

/// What a client sends after one round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: GnnParams,
    /// Labeled training nodes of the current task.
    pub train_count: usize,
    pub loss: f64,
    pub packets: Option<Vec<PrototypeGradientPacket>>,
    pub trajectory: Option<EvolutionTrajectory>,
}

/// Round inputs shared by all clients.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub round: usize,
    pub rounds: usize,
    pub train: &'a TrainHyper,
    pub hyper: &'a ClientHyper,
    pub options: ClientOptions,
    pub encoder: Option<&'a EncodingNet>,
    pub seed: SeedStream,
}

/// One round of client execution. Starts from the global parameters, trains
/// for `E` epochs, emits packets and trajectory on round 1 and extends the
/// buffer on round `R`.
pub fn local_update(
    state: &mut ClientState,
    global: &GnnParams,
    task: &TaskView,
    ctx: &RoundContext<'_>,
) -> Result<ClientUpdate> {
    if ctx.round == 0 || ctx.round > ctx.rounds {
        return Err(Error::Invalid(format!("round {} outside [1, {}]", ctx.round, ctx.rounds)));
    }
    let beta = if ctx.options.replay { ctx.hyper.beta } else { 1.0 };
    let empty = ExperienceBuffer::new();
    let buffer = if ctx.options.replay { &state.buffer } else { &empty };
    let dropout = ctx.train.dropout;
    let (params, loss) = gnn::train_epochs(global, &mut state.adam, ctx.train, ctx.seed, |tape, vars, rng| {
        combined_loss_on_tape(tape, global, vars, task, buffer, beta, Mode::Train { dropout }, rng)
    })?;
    state.params = params;

    let mut packets = None;
    let mut trajectory = None;
    if ctx.round == 1 && ctx.options.encode {
        let net = ctx
            .encoder
            .ok_or_else(|| Error::Contract("encoding requested without an encoding net".into()))?;
        packets = Some(encode_prototypes(task, net, state.id)?);
        let q = update_trajectory(state.trajectory.as_ref(), task, global.arch().num_classes, ctx.hyper.phi)?;
        state.trajectory = Some(q.clone());
        trajectory = Some(q);
    }
    if ctx.round == ctx.rounds && ctx.options.replay {
        let selected = select_experience_nodes(task, &state.params, global, ctx.hyper)?;
        state.buffer.extend(selected);
    }
    Ok(ClientUpdate {
        client: state.id,
        params: state.params.clone(),
        train_count: task.masks.count(MaskKind::Train),
        loss,
        packets,
        trajectory,
    })
}
