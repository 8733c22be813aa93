//! Pose transfer between triangle meshes.
//!
//! Given an identity mesh (supplying body shape and output vertex order) and a
//! pose mesh (supplying articulation), the pipeline extracts per-vertex
//! features, solves an entropic optimal-transport problem between the two
//! vertex sets, warps the pose mesh through the resulting transport plan, and
//! refines the warped mesh with conditional normalization blocks. Everything
//! runs on a small reverse-mode tape in double precision, so the whole
//! pipeline is trainable end to end and every gradient can be checked against
//! finite differences.

use blas_src as _;

pub mod correspondence;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod mesh;
pub mod metrics;
pub mod refinement;
pub mod training;

pub use correspondence::TransportPlan;
pub use error::{Error, Result};
pub use mesh::{Adjacency, Mesh};
pub use training::{Checkpoint, TrainConfig};
