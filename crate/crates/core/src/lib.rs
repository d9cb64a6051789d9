//! Federated continual graph learning simulator.
//!
//! Builds class-incremental multi-client graph task sequences from a single
//! graph, runs the client/server protocol with experience replay and
//! trajectory-aware knowledge transfer, and reports accuracy/forgetting
//! metrics.

pub mod client;
pub mod encoding;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod harness;
pub mod numerics;
pub mod partition;
pub mod server;

pub use error::{Error, Result};
