//! Mixture of dyadic experts (MoDE) and related low-rank adapter families.
//!
//! * [`tensor`]: dense matrices, reverse-mode tape, finite-difference oracle.
//! * [`adapters`]: LoRA, MoLoRA, MoLoRA-SD and MoDE layers, routing,
//!   parameter accounting and checkpoints.
//! * [`training`]: Adam/SGD training loop over frozen base weights.
//! * [`synthbench`]: synthetic multi-task regression suites.
//! * [`analysis`]: rank-slice PCA, cluster separation, win rates and
//!   binomial significance.

pub mod adapters;
pub mod analysis;
pub mod error;
pub mod linalg;
pub mod seed;
pub mod synthbench;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
