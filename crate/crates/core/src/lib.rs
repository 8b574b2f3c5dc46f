//! Workbench for adapting Vision Transformers by training a random subset of
//! the columns of each block's attention output projection, alongside the
//! usual baselines (linear probe, MLP head, last-k blocks, BitFit, LoRA, full
//! fine-tuning), with exact trainable-parameter and memory accounting.

pub mod adaptation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, ErrorClass, Result};
pub use rng::Rng;
pub use tensor::Tensor;
