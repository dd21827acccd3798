//! 2D-to-3D human pose lifting with a dual-stream Transformer/GCN backbone,
//! diffusion-based refinement, and PDE-controlled attention smoothing.
//!
//! The crate is organized around a small dense-tensor engine with
//! reverse-mode gradients ([`numerics`]), a pose data model with synthetic
//! motion generation ([`skeleton`]), the dual-stream backbone
//! ([`dualstream`]), the diffusion process and samplers ([`diffusion`]),
//! attention smoothing control ([`pde`]), evaluation metrics ([`metrics`]),
//! and a training/evaluation harness ([`harness`]).

pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod diffusion;
pub mod dualstream;
pub mod pde;
pub mod skeleton;

pub use error::{Error, Result};
