//! Superpixel patch pooling and latent cross-attention for vision transformers.

pub mod bench;
pub mod error;
pub mod imaging;
pub mod lla;
pub mod model;
pub mod numerics;
pub mod slic;
pub mod sppp;

pub use error::{Error, Result};
