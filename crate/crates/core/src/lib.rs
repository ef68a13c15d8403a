//! Multiscale autoregressive image density estimation.
//!
//! An image's joint distribution is factorized over pixel groups arranged
//! in a sub-sampling pyramid: a base-resolution PixelCNN plus a stack of
//! per-scale upscaler networks, giving O(log N) sequential sampling steps
//! with exact likelihoods. A brute-force oracle layer certifies
//! normalization, causality, and gradient correctness on small instances.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod image;
pub mod likelihood;
pub mod network;
pub mod oracle;
pub mod pyramid;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use image::Image;
pub use pyramid::{build_schedule, Corner, GroupId, GroupSchedule};
pub use tensor::{Graph, NodeId, Padding, Tensor};
