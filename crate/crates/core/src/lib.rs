//! Rotation-invariant point convolution driven by equivariant local reference
//! frames (LRFs).

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod autodiff;
pub mod conv;
pub mod data;
mod error;
pub mod geometry;
pub mod layers;
pub mod lrf;
pub mod network;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
