//! Dense tensors, reverse-mode differentiation, optimizers and the small
//! distance/divergence kernels used throughout the simulator.

mod adam;
mod kernels;
mod lbfgs;
mod rng;
mod sparse;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use kernels::{kl_divergence, log_softmax_rows, pairwise_euclidean, softmax_rows, LOG_FLOOR};
pub use lbfgs::{Lbfgs, LbfgsConfig};
pub use rng::SeedStream;
pub use sparse::Neighborhoods;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
