//! Prompt-conditioned dynamic gating for convolutional classifiers.
//!
//! A small reverse-mode autograd engine over dense `f64` tensors drives a
//! residual CNN whose per-block channel and spatial masks are predicted from
//! visual features fused with a text embedding of the scene name. Masks are
//! trained with straight-through Gumbel-sigmoid gates and an annealed density
//! bound loss.

pub mod error;
pub(crate) mod binio;
pub mod tensor;
pub mod tape;
pub mod ops;
pub mod gradcheck;
pub mod rng;
pub mod prompt;
pub mod slot;
pub mod gate;
pub mod loss;
pub mod params;
pub mod net;
pub mod data;
pub mod checkpoint;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
