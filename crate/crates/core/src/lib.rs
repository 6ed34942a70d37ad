//! Coarse-to-fine training engine.
//!
//! A coarse model predicts a class vector, a box, or a mask. The prediction is
//! rasterized into a dense map, transformed by two conv+ReLU layers to match
//! the image shape, and concatenated to the image as the fine model's input.
//! Progressive training feeds the fine model a stochastic mixture of ground
//! truth and coarse output whose coarse share rises on a schedule.

pub mod diagnostics;
pub mod encode;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use nn::{Model, ModelSpec};
pub use rng::{Rng, StreamKind};
pub use tensor::Tensor;
