//! Dynamic disentangled fusion for RGB-thermal single-object tracking.

pub mod ablation;
pub mod aggregation;
pub mod autograd;
pub mod bbox;
pub mod branch;
pub mod config;
pub mod digest;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image;
pub mod model;
pub mod param;
pub mod synth;
pub mod tensor;
pub mod trace;
pub mod track;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
