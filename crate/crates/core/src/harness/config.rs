//! Flat experiment configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{ClientHyper, ClientOptions};
use crate::error::{Error, Result};
use crate::gnn::{GnnVariant, TrainHyper};
use crate::graph::{SbmBlock, SbmSpec};
use crate::partition::SplitRatios;
use crate::server::{ReconConfig, ReconOptimizer, TransferConfig};

/// Dataset value selecting the built-in block-model graph.
pub const SYNTHETIC: &str = "synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Power,
    FedavgFinetune,
    PowerWoLgf,
    PowerWoGec,
    PowerLocalCm,
    PowerNoncumulative,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Power,
        Method::FedavgFinetune,
        Method::PowerWoLgf,
        Method::PowerWoGec,
        Method::PowerLocalCm,
        Method::PowerNoncumulative,
    ];

    /// The full method and its four ablations.
    pub const ABLATIONS: [Method; 5] = [
        Method::Power,
        Method::PowerWoLgf,
        Method::PowerWoGec,
        Method::PowerLocalCm,
        Method::PowerNoncumulative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Power => "power",
            Method::FedavgFinetune => "fedavg_finetune",
            Method::PowerWoLgf => "power_wo_lgf",
            Method::PowerWoGec => "power_wo_gec",
            Method::PowerLocalCm => "power_local_cm",
            Method::PowerNoncumulative => "power_noncumulative",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {name:?}; expected one of {}", known.join(", ")))
            })
    }

    /// Client-side procedures the method runs.
    pub fn client_options(self) -> ClientOptions {
        match self {
            Method::FedavgFinetune => ClientOptions {
                replay: false,
                encode: false,
            },
            Method::PowerWoLgf => ClientOptions {
                replay: false,
                encode: true,
            },
            Method::PowerWoGec => ClientOptions {
                replay: true,
                encode: false,
            },
            _ => ClientOptions {
                replay: true,
                encode: true,
            },
        }
    }

    /// Whether the server reconstructs prototypes and runs knowledge transfer.
    pub fn server_refinement(self) -> bool {
        self.client_options().encode
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Every knob of one experiment. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Path to a JSON graph file, or `"synthetic"`.
    pub dataset: String,
    pub clients: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub method: Method,

    pub gnn: GnnVariant,
    pub hidden_dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,

    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
    pub epsilon: f64,
    pub buffer_per_class: usize,
    pub knn_k: usize,
    pub knn_exclude_self: bool,
    pub transfer_lr: f64,

    pub recon_iterations: usize,
    pub recon_optimizer: ReconOptimizer,
    pub recon_lr: f64,
    pub recon_tolerance: f64,
    pub recon_use_packet_pattern: bool,

    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,

    pub feature_mask_rate: f64,
    pub edge_drop_rate: f64,
    pub label_mask_rate: f64,
    pub client_participation_rate: f64,

    pub seeds: Vec<u64>,
    /// Run client updates and reconstructions on a worker pool.
    pub parallel: bool,

    pub sbm_intra_prob: f64,
    pub sbm_inter_prob: f64,
    pub sbm_feature_dim: usize,
    pub sbm_separation: f64,
    pub sbm_noise: f64,
    pub sbm_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainHyper::default();
        let client = ClientHyper::default();
        let recon = ReconConfig::default();
        let ratios = SplitRatios::default();
        Self {
            dataset: SYNTHETIC.into(),
            clients: 3,
            tasks: 3,
            classes_per_task: 2,
            rounds: 10,
            local_epochs: train.epochs,
            global_epochs: TransferConfig::default().epochs,
            method: Method::Power,
            gnn: GnnVariant::Gat,
            hidden_dim: 64,
            lr: train.lr,
            weight_decay: train.weight_decay,
            dropout: train.dropout,
            alpha: client.alpha,
            beta: client.beta,
            phi: client.phi,
            epsilon: client.epsilon,
            buffer_per_class: client.buffer_per_class,
            knn_k: 1,
            knn_exclude_self: false,
            transfer_lr: TransferConfig::default().lr,
            recon_iterations: recon.iterations,
            recon_optimizer: recon.optimizer,
            recon_lr: recon.lr,
            recon_tolerance: recon.tolerance,
            recon_use_packet_pattern: recon.use_packet_pattern,
            train_ratio: ratios.train,
            val_ratio: ratios.val,
            test_ratio: ratios.test,
            feature_mask_rate: 0.0,
            edge_drop_rate: 0.0,
            label_mask_rate: 0.0,
            client_participation_rate: 1.0,
            seeds: vec![0],
            parallel: true,
            sbm_intra_prob: 0.3,
            sbm_inter_prob: 0.0005,
            sbm_feature_dim: 32,
            sbm_separation: 4.0,
            sbm_noise: 1.0,
            sbm_seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets one field from its textual value, as used by parameter sweeps.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        table.insert(key.to_string(), parsed);
        let updated: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clients", self.clients),
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("hidden_dim", self.hidden_dim),
            ("buffer_per_class", self.buffer_per_class),
            ("knn_k", self.knn_k),
            ("recon_iterations", self.recon_iterations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let unit = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("phi", self.phi),
            ("feature_mask_rate", self.feature_mask_rate),
            ("edge_drop_rate", self.edge_drop_rate),
            ("label_mask_rate", self.label_mask_rate),
            ("client_participation_rate", self.client_participation_rate),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.client_participation_rate == 0.0 {
            return Err(Error::Config("client_participation_rate must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.dataset.is_empty() {
            return Err(Error::Config("dataset must be a file path or \"synthetic\"".into()));
        }
        self.train_hyper().validate().map_err(config_error)?;
        self.client_hyper().validate().map_err(config_error)?;
        self.recon_config().validate().map_err(config_error)?;
        self.split_ratios().validate().map_err(config_error)?;
        if !(self.transfer_lr >= 0.0) {
            return Err(Error::Config("transfer_lr must be nonnegative".into()));
        }
        if self.is_synthetic() {
            self.sbm_spec().validate().map_err(config_error)?;
        }
        Ok(())
    }

    pub fn is_synthetic(&self) -> bool {
        self.dataset == SYNTHETIC
    }

    /// Short dataset label used in result files.
    pub fn dataset_name(&self) -> String {
        if self.is_synthetic() {
            return SYNTHETIC.into();
        }
        Path::new(&self.dataset)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.dataset.clone())
    }

    pub fn total_classes(&self) -> usize {
        self.classes_per_task * self.tasks
    }

    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            epochs: self.local_epochs,
        }
    }

    /// Client trade-offs after the method's overrides.
    pub fn client_hyper(&self) -> ClientHyper {
        let mut h = ClientHyper {
            alpha: self.alpha,
            beta: self.beta,
            phi: self.phi,
            epsilon: self.epsilon,
            buffer_per_class: self.buffer_per_class,
        };
        match self.method {
            Method::PowerLocalCm => h.alpha = 1.0,
            Method::PowerNoncumulative => h.phi = 0.0,
            Method::PowerWoLgf | Method::FedavgFinetune => h.beta = 1.0,
            _ => {}
        }
        h
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            iterations: self.recon_iterations,
            optimizer: self.recon_optimizer,
            lr: self.recon_lr,
            tolerance: self.recon_tolerance,
            use_packet_pattern: self.recon_use_packet_pattern,
        }
    }

    pub fn transfer_config(&self) -> TransferConfig {
        TransferConfig {
            epochs: self.global_epochs,
            lr: self.transfer_lr,
        }
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train_ratio,
            val: self.val_ratio,
            test: self.test_ratio,
        }
    }

    /// Block model behind `dataset = "synthetic"`: six classes of three
    /// blocks each. Block sizes step down so that greedy size-balanced client
    /// assignment hands every one of three clients one block per class.
    pub fn sbm_spec(&self) -> SbmSpec {
        let mut blocks = Vec::new();
        for class in 0..6 {
            let top = 50 - 6 * class;
            for j in 0..3 {
                blocks.push(SbmBlock {
                    size: top - j,
                    label: class,
                });
            }
        }
        SbmSpec {
            blocks,
            intra_block_edge_prob: self.sbm_intra_prob,
            inter_block_edge_prob: self.sbm_inter_prob,
            feature_dim: self.sbm_feature_dim,
            class_mean_separation: self.sbm_separation,
            feature_noise_std: self.sbm_noise,
            seed: self.sbm_seed,
        }
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Invalid(msg) => Error::Config(msg),
        other => other,
    }
}
