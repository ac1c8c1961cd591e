//! Baseline ViT and the superpixel/latent-attention variants, with training,
//! evaluation and checkpoints.
//!
//! Every image is encoded on its own tape segment, so sequences of different
//! length share a batch without padding.

pub mod checkpoint;
mod config;
mod network;
mod train;

pub use config::{ModelConfig, Preset, Variant};
pub use network::{
    baseline_parameter_count, lla_config, Encoder, ForwardTrace, Frontend, LatentBlock, Model, Network, Norm, Prepared,
    SelfBlock,
};
pub use train::{argmax, check_gradients, count_correct, evaluate, AdamW, EpochStats, TrainState};

#[cfg(test)]
mod tests;
