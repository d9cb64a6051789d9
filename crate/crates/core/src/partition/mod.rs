//! Decentralized evolving-graph simulation: community partitioning into
//! client subgraphs, then class-incremental task splitting per client.

mod louvain;
mod tasks;

pub use louvain::{assign_clients, louvain, modularity, CommunityAssignment, MIN_GAIN};
pub use tasks::{
    split_tasks, split_train_val_test, ClassOrder, ClientDataset, MaskKind, SplitMasks,
    SplitRatios, TaskView,
};
