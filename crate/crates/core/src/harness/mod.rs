//! Experiment orchestration: configuration, the end-to-end run loop, method
//! variants, sparsity knobs, metrics and result export.

mod config;
mod export;
mod metrics;
mod run;
mod sparsity;

pub use config::{ExperimentConfig, Method, SYNTHETIC};
pub use export::{
    export, mean_std, read_results, result_rows, summarize, ExportPaths, ResultRow, SummaryRow, LOG_FILE,
    RESULTS_FILE, SUMMARY_FILE,
};
pub use metrics::{compute_metrics, AccuracyMatrix};
pub use run::{
    load_dataset, prepare_clients, run_experiment, run_on_clients, run_protocol, RunOutcome, ClientReport, LogRecord, MetricsReport,
    RoundPoint,
};
pub use sparsity::{apply_sparsity, sample_participants, SparsityKnobs};
