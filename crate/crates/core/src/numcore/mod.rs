//! Deterministic dense numerical kernels.
//!
//! Everything here is plain f64: row-major matrices, seeded RNG streams that
//! reproduce bit-for-bit across platforms, scalar activations with their
//! derivatives, and the softmax cross-entropy primitive. No BLAS, no SIMD
//! intrinsics; desk-scale problems do not need them and determinism does.

mod matrix;
mod ops;
mod rng;

pub use matrix::DenseMatrix;
pub use ops::{clip_grad_norm, relu, sigmoid, softmax_cross_entropy, tanh_act};
pub use rng::{derive_seed, Dist, RngStream, RNG_ALGORITHM};
