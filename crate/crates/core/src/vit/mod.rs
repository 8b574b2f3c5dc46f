//! Vision Transformer with pre-norm blocks, optional LayerScale, and an
//! analytic backward pass that only computes what a trainable set needs.

mod backward;
mod config;
mod forward;
mod grads;
mod params;

pub use backward::{backward, cross_entropy, loss, loss_and_backward, position};
pub use config::{LoraConfig, LoraTarget, ViTConfig};
pub use forward::{
    attention_block, forward, lora_forward_delta, patchify, predict, AttnCache, BlockCache,
    ForwardCache, MlpCache,
};
pub use grads::{decays, GradSet, Selection, TrainEntry, TrainSet};
pub use params::{init_params, layout, BlockParams, HeadLayer, LoraPair, ViTParams, INIT_STD};
