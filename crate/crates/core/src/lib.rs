//! Audio-visual contrastive representation learning with feature-space
//! crops and transformer temporal pooling, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with reverse-mode autodiff
//! - [`nn`]: miniature video/audio encoders, pooling functions, projection heads
//! - [`augment`]: input-space tube crops, photometric jitter, feature crops
//! - [`contrastive`]: NCE losses and the crop-pair enumeration
//! - [`data`]: synthetic paired audio-visual instances
//! - [`model`]: the two-tower model wiring encoders, pool and heads
//! - [`train`]: optimizer, schedules, the pretraining loop, checkpoints
//! - [`eval`]: retrieval, probes, heatmaps and the crop-cost benchmark
//! - [`config`]: `key = value` run configuration

pub mod augment;
pub mod config;
pub mod container;
pub mod contrastive;
pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
