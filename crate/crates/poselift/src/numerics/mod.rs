//! Dense-tensor substrate: linear algebra, normalization kernels, a
//! reverse-mode gradient tape, a finite-difference oracle, and a 3x3 SVD.

pub(crate) mod attn_core;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod scalar;
pub mod svd3;
pub mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use kernels::{layer_norm, matmul, softmax};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use svd3::{det3, svd3};
pub use tape::{Adjacency, Mode, Tape, Var};
pub use tensor::Tensor;
