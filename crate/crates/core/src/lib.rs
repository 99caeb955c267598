//! Multi-scale interactive network for salient object detection.
//!
//! The crate bundles a small autodiff engine, the network itself (encoder,
//! aggregate/self interaction modules, decoder), the BCE and
//! consistency-enhanced losses, the standard saliency metrics, dataset
//! tooling, and a momentum-SGD trainer.

pub mod ablation;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod interaction;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
