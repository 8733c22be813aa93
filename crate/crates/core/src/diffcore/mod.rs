//! Differentiable-computation substrate: a reverse-mode tape over dense
//! double-precision matrices, the layer primitives built on it, an Adam
//! optimizer, and a finite-difference gradient checker.
//!
//! Feature blocks are laid out channels x vertices (D x N). Batches are
//! processed one sample at a time; every operation here is per-sample, so
//! summing gradients over samples reproduces batched training exactly.

mod gradcheck;
mod layers;
mod optim;
mod tape;

pub use gradcheck::{grad_check, grad_check_graph};
pub use layers::{
    fully_connected, init_layer, instance_norm, leaky_relu, pointwise_linear, LayerParams,
    LayerVars, INSTANCE_NORM_EPS, LEAKY_SLOPE,
};
pub use optim::AdamState;
pub use tape::{Graph, Var};
