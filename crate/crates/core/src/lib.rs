//! Training with unreliable labels: per-sample loss modeling splits the data
//! into clean, easy-noisy, and hard-noisy subsets; hard samples are dropped,
//! the rest are relabeled and mixed in proportion to the split sizes.
//!
//! Modules build bottom-up: [`mat`] and [`rng`] are shared plumbing, [`nn`]
//! is the network with analytic gradients, [`data`] generates and corrupts
//! datasets, [`ssl`] pretrains an encoder without labels, [`filter`] fits the
//! loss/confidence mixture models, and [`train`] runs the co-trained loop.

pub mod data;
pub mod error;
pub mod filter;
pub mod mat;
pub mod nn;
pub mod rng;
pub mod ssl;
pub mod train;

pub use error::{Error, Result};
pub use mat::Mat;
