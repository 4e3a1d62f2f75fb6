pub mod config;
pub mod data;
pub mod decoder;
pub mod distill;
pub mod ema;
pub mod encoder;
pub mod error;
pub mod features;
pub mod flow;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tradeoff;
pub mod train;

pub use error::{Error, Result};
