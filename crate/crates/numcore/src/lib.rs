//! Dense tensors, the kernels a small detection transformer needs, and a
//! reverse-mode differentiation tape with a finite-difference checker.
//!
//! Everything is generic over [`Scalar`] (`f32` for inference and training,
//! `f64` for gradient verification).

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod scalar;
pub mod tensor;

pub use attention::{multi_head_attention, multi_head_self_attention, AttentionMask, AttentionOutput, MhaVars};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_at, Coord};
pub use graph::{Gradients, Graph, Var, BOX_EPS};
pub use kernels::{bilinear_sample, layer_norm, matmul, softmax, top_k, ConvGeometry, DeformLayout, Level};
pub use scalar::{DType, Scalar};
pub use tensor::{AnyTensor, Tensor, TNSR_MAGIC, TNSR_VERSION};

/// Deterministic generator used for all initialization and sampling.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeds a [`Rng`] from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    <Rng as rand::SeedableRng>::seed_from_u64(seed)
}
