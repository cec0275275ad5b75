//! Density-map object counting with U-Net and gated U-Net regressors.
//!
//! The crate is organized bottom-up: [`tensor`] holds dense rank-4 arrays
//! and a reverse-mode tape, [`net`] builds the counting networks on top of
//! it, [`data`] turns dot annotations into training patches, [`optim`]
//! trains and checkpoints, and [`metrics`] scores predictions.

pub mod data;
pub mod error;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
