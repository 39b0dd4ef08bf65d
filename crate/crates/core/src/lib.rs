//! Self-training for unsupervised domain adaptation of semantic segmentation
//! with a momentum network, multi-scale fusion of augmented views,
//! class-prior thresholds, a focal target loss and importance sampling.

pub mod cli;
pub mod config;
pub mod databench;
pub mod error;
pub mod imaging;
pub mod io;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use config::{Ablations, FusionMode, RunConfig};
pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
pub mod fusion;
pub mod loss;
pub mod pseudo;
pub mod sampler;
