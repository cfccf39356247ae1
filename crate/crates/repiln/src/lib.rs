//! Reparameterized inertial localization network.
//!
//! Multi-branch 1D convolutional blocks for training that fuse exactly into
//! single-path convolutions for deployment, combined with temporal-scale
//! sparse attention and a gated convolutional mixer. The crate also carries
//! everything needed to exercise the network end to end on one machine: a
//! minimal reverse-mode tensor engine, an Adam training loop with plateau
//! decay and early stopping, a synthetic strapdown IMU generator, and
//! trajectory metrics (ATE/RTE) with report emission.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod gcu;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod repblock;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod tssa;

pub use error::{Error, Result};
