//! Masked diffusion transformer: latent masking, an asymmetric
//! encoder / side-interpolater / decoder network, dual-pass diffusion
//! training, and classifier-free-guided ancestral sampling, all on a small
//! reverse-mode autodiff engine.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod masking;
pub mod network;
pub mod render;
pub mod sampling;
pub mod schedules;
pub mod training;
