//! Task → round → {clients, server} orchestration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{local_update, ClientState, ClientUpdate, EvolutionTrajectory, RoundContext};
use crate::encoding::{EncodingNet, PrototypeGradientPacket};
use crate::error::{Error, Result};
use crate::gnn::{self, Architecture, GnnParams};
use crate::graph::{generate_sbm, induced_subgraph, load_graph, Graph};
use crate::numerics::SeedStream;
use crate::partition::{assign_clients, louvain, split_tasks, ClassOrder, ClientDataset, MaskKind};
use crate::server::{
    aggregate, build_buffer_graph, knowledge_transfer, reconstruct, GlobalBuffer, GlobalRow, Reconstruction,
};

use super::config::{ExperimentConfig, Method};
use super::metrics::{compute_metrics, AccuracyMatrix};
use super::sparsity::{apply_sparsity, sample_participants, SparsityKnobs};

/// One protocol message or evaluation, as written to the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    ClientUpdate {
        task: usize,
        round: usize,
        client: usize,
        train_count: usize,
        loss: f64,
        packets: usize,
    },
    Reconstruction {
        task: usize,
        round: usize,
        client: usize,
        class: usize,
        initial_loss: f64,
        final_loss: f64,
    },
    Aggregation {
        task: usize,
        round: usize,
        participants: Vec<usize>,
    },
    Transfer {
        task: usize,
        round: usize,
        buffer_rows: usize,
        teachers: usize,
        losses: Vec<f64>,
    },
    Evaluation {
        task: usize,
        client: usize,
        accuracies: Vec<f64>,
    },
}

/// Accuracy of one client's local models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client: usize,
    pub accuracy: AccuracyMatrix,
    /// Test-node count of each task.
    pub test_counts: Vec<usize>,
}

/// Combined AM over the tasks seen so far, after one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundPoint {
    pub task: usize,
    pub round: usize,
    pub am: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub dataset: String,
    pub seed: u64,
    pub am: f64,
    pub fm: Option<f64>,
    pub combined: AccuracyMatrix,
    pub clients: Vec<ClientReport>,
    pub rounds: Vec<RoundPoint>,
    pub config: ExperimentConfig,
    pub log: Vec<LogRecord>,
}

/// Loads or generates the source graph named by the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Graph> {
    if cfg.is_synthetic() {
        generate_sbm(&cfg.sbm_spec())
    } else {
        load_graph(&cfg.dataset)
    }
}

/// Community partition into client subgraphs, class-incremental task split
/// and sparsity knobs. Depends on the seed but not on the method.
pub fn prepare_clients(cfg: &ExperimentConfig, graph: &Graph, seed: u64) -> Result<Vec<ClientDataset>> {
    let communities = louvain(graph, seed)?;
    let parts = assign_clients(&communities, cfg.clients)?;
    let knobs = SparsityKnobs {
        feature_mask_rate: cfg.feature_mask_rate,
        edge_drop_rate: cfg.edge_drop_rate,
        label_mask_rate: cfg.label_mask_rate,
    };
    let stream = SeedStream::new(seed);
    parts
        .iter()
        .enumerate()
        .map(|(k, nodes)| {
            let (sub, _) = induced_subgraph(graph, nodes)?;
            let mut data = split_tasks(
                &sub,
                k,
                cfg.classes_per_task,
                cfg.tasks,
                &ClassOrder::ByFrequency,
                cfg.split_ratios(),
                seed,
            )?;
            apply_sparsity(&mut data, &knobs, stream)?;
            Ok(data)
        })
        .collect()
}

/// Runs one seed of the configured method end to end.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<MetricsReport> {
    cfg.validate()?;
    let graph = load_dataset(cfg)?;
    let data = prepare_clients(cfg, &graph, seed)?;
    run_on_clients(cfg, &data, seed)
}

fn map_clients<T, R, F>(parallel: bool, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    if parallel {
        items.into_par_iter().map(f).collect()
    } else {
        items.into_iter().map(f).collect()
    }
}

/// Final models next to the report.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub global: GnnParams,
    /// Each client's local parameters after its last update.
    pub locals: Vec<GnnParams>,
}

/// Runs the protocol on prepared client datasets.
pub fn run_on_clients(cfg: &ExperimentConfig, data: &[ClientDataset], seed: u64) -> Result<MetricsReport> {
    run_protocol(cfg, data, seed).map(|o| o.report)
}

/// Runs the protocol and keeps the final models.
///
/// Randomness: the initial global model draws from `rng("init")` of the run
/// seed's stream, client k's update in round r of task t from
/// `fork("local/{t}/{r}/{k}")`, so runs that share a seed share both.
pub fn run_protocol(cfg: &ExperimentConfig, data: &[ClientDataset], seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    if data.len() != cfg.clients {
        return Err(Error::Config(format!("{} client datasets for {} clients", data.len(), cfg.clients)));
    }
    let t_count = cfg.tasks;
    let feature_dim = data[0].tasks[0].features.cols();
    let num_classes = cfg.total_classes();
    for d in data {
        if d.tasks.len() != t_count || d.num_classes() != num_classes {
            return Err(Error::Config(format!("client {} does not have {t_count} tasks", d.client)));
        }
    }

    let stream = SeedStream::new(seed);
    let mut arch = Architecture::new(cfg.gnn, feature_dim, num_classes);
    arch.hidden_dim = cfg.hidden_dim;
    let mut global = GnnParams::init(arch, &mut stream.rng("init"));
    let mut states: Vec<ClientState> = (0..cfg.clients).map(|k| ClientState::new(k, global.clone())).collect();

    let options = cfg.method.client_options();
    let refine = cfg.method.server_refinement();
    let train = cfg.train_hyper();
    let hyper = cfg.client_hyper();
    let recon_cfg = cfg.recon_config();
    let transfer_cfg = cfg.transfer_config();
    let encoder = options.encode.then(|| EncodingNet::new(seed, feature_dim, num_classes));

    let mut buffer = GlobalBuffer::new();
    let mut trajectories: Vec<Option<EvolutionTrajectory>> = vec![None; cfg.clients];
    let mut matrices = vec![AccuracyMatrix::empty(); cfg.clients];
    let mut rounds = Vec::new();
    let mut log = Vec::new();

    for t in 0..t_count {
        for r in 1..=cfg.rounds {
            let participants =
                sample_participants(cfg.clients, cfg.client_participation_rate, &mut stream.rng(&format!("participation/{t}/{r}")));
            let work: Vec<(&mut ClientState, &ClientDataset)> = states
                .iter_mut()
                .zip(data)
                .filter(|(s, _)| participants.binary_search(&s.id).is_ok())
                .collect();
            let updates: Vec<ClientUpdate> = map_clients(cfg.parallel, work, |(state, d)| {
                let ctx = RoundContext {
                    round: r,
                    rounds: cfg.rounds,
                    train: &train,
                    hyper: &hyper,
                    options,
                    encoder: encoder.as_ref(),
                    seed: stream.fork(&format!("local/{t}/{r}/{}", state.id)),
                };
                local_update(state, &global, &d.tasks[t], &ctx)
            })
            .into_iter()
            .collect::<Result<_>>()?;

            for u in &updates {
                log.push(LogRecord::ClientUpdate {
                    task: t,
                    round: r,
                    client: u.client,
                    train_count: u.train_count,
                    loss: u.loss,
                    packets: u.packets.as_ref().map_or(0, Vec::len),
                });
                if let Some(q) = &u.trajectory {
                    trajectories[u.client] = Some(q.clone());
                }
            }

            if refine {
                let packets: Vec<(usize, &PrototypeGradientPacket)> = updates
                    .iter()
                    .flat_map(|u| u.packets.iter().flatten().enumerate())
                    .collect();
                let net = encoder.as_ref().expect("refinement implies an encoder");
                let recons: Vec<Reconstruction> = map_clients(cfg.parallel, packets.clone(), |(i, p)| {
                    reconstruct(p, net, &recon_cfg, stream.fork(&format!("recon/{t}/{}/{i}", p.client)))
                })
                .into_iter()
                .collect::<Result<_>>()?;
                for ((_, p), rec) in packets.iter().zip(recons) {
                    log.push(LogRecord::Reconstruction {
                        task: t,
                        round: r,
                        client: p.client,
                        class: rec.class,
                        initial_loss: rec.initial_loss,
                        final_loss: rec.final_loss,
                    });
                    buffer.push(GlobalRow {
                        features: rec.prototype,
                        label: rec.class,
                        client: p.client,
                        task: p.task,
                    });
                }
            }

            global = aggregate(&updates)?;
            log.push(LogRecord::Aggregation {
                task: t,
                round: r,
                participants: participants.clone(),
            });

            if refine && !buffer.is_empty() && transfer_cfg.epochs > 0 {
                let teachers: Vec<(&GnnParams, &EvolutionTrajectory)> = updates
                    .iter()
                    .filter_map(|u| Some((&u.params, trajectories[u.client].as_ref()?)))
                    .collect();
                if !teachers.is_empty() {
                    let x = buffer.features()?;
                    let nb = std::sync::Arc::new(build_buffer_graph(&x, cfg.knn_k, cfg.knn_exclude_self)?);
                    let (refined, losses) = knowledge_transfer(&global, &teachers, &buffer, &nb, &transfer_cfg)?;
                    global = refined;
                    log.push(LogRecord::Transfer {
                        task: t,
                        round: r,
                        buffer_rows: buffer.len(),
                        teachers: teachers.len(),
                        losses,
                    });
                }
            }

            let accs = evaluate_all(&states, data, t)?;
            rounds.push(RoundPoint {
                task: t,
                round: r,
                am: combined_row_mean(&accs, data, t)?,
            });
            if r == cfg.rounds {
                for (k, row) in accs.into_iter().enumerate() {
                    log.push(LogRecord::Evaluation {
                        task: t,
                        client: k,
                        accuracies: row.clone(),
                    });
                    matrices[k].push_row(row)?;
                }
            }
        }
        log::info!(
            "{} seed {seed}: task {t} done, AM so far {:.4}",
            cfg.method,
            rounds.last().map_or(0.0, |p| p.am)
        );
    }

    let counts = test_counts(data);
    let combined = AccuracyMatrix::combine(&matrices, &counts)?;
    let (am, fm) = compute_metrics(&combined)?;
    let clients = matrices
        .into_iter()
        .zip(counts)
        .enumerate()
        .map(|(client, (accuracy, test_counts))| ClientReport {
            client,
            accuracy,
            test_counts,
        })
        .collect();
    let report = MetricsReport {
        method: cfg.method,
        dataset: cfg.dataset_name(),
        seed,
        am,
        fm,
        combined,
        clients,
        rounds,
        config: cfg.clone(),
        log,
    };
    Ok(RunOutcome {
        report,
        global,
        locals: states.into_iter().map(|s| s.params).collect(),
    })
}

fn test_counts(data: &[ClientDataset]) -> Vec<Vec<usize>> {
    data.iter()
        .map(|d| d.tasks.iter().map(|task| task.masks.count(MaskKind::Test)).collect())
        .collect()
}

/// Test accuracy of every client's local model on its tasks 0..=t.
fn evaluate_all(states: &[ClientState], data: &[ClientDataset], t: usize) -> Result<Vec<Vec<f64>>> {
    states
        .iter()
        .zip(data)
        .map(|(s, d)| {
            d.tasks[..=t]
                .iter()
                .map(|task| gnn::evaluate(&s.params, task, MaskKind::Test))
                .collect()
        })
        .collect()
}

fn combined_row_mean(accs: &[Vec<f64>], data: &[ClientDataset], t: usize) -> Result<f64> {
    let counts = test_counts(data);
    let mut sum = 0.0;
    for j in 0..=t {
        let total: usize = counts.iter().map(|c| c[j]).sum();
        if total == 0 {
            return Err(Error::Invalid(format!("task {j} has no test nodes on any client")));
        }
        sum += accs.iter().zip(&counts).map(|(a, c)| c[j] as f64 / total as f64 * a[j]).sum::<f64>();
    }
    Ok(sum / (t + 1) as f64)
}
