//! Building blocks shared by the encoder, decoder and feature extractor.

pub mod conv;
pub mod layers;

pub use layers::{avg_pool, group_norm, layer_norm, num_groups, silu, upsample_nearest, Conv2d, Linear};
