//! Dense linear algebra and the differentiable primitives used by the refiner.
//!
//! Storage is generic over [`Real`]; production code uses `f32` and the
//! gradient checks instantiate the very same kernels with `f64`. Every
//! reduction (dot products, means, variances) accumulates in `f64` with a
//! fixed, sequential order over the contraction axis, so repeated runs on
//! one platform are bit-identical.

mod activation;
mod cosine;
mod finite_diff;
pub(crate) mod layer_norm;
mod matrix;

pub use activation::{relu, relu_backward, ReluMask};
pub use cosine::{
    cosine_logits, l2_normalize, l2_normalize_backward, CosineKernel, CosineOutput, L2Cache,
};
pub use finite_diff::{finite_diff_grad, max_relative_error, relative_error, REL_ERROR_FLOOR};
pub use layer_norm::{layer_norm, layer_norm_backward, LayerNormCache, LAYER_NORM_EPS};
pub use matrix::{matmul, Matrix, Vector};

use std::fmt::Debug;

/// Vectors whose L2 norm falls below this are rejected rather than normalized.
pub const NORM_FLOOR: f64 = 1e-8;

/// Scalar storage type. Arithmetic is carried out in `f64` and rounded back
/// on store.
pub trait Real: Copy + Default + PartialEq + PartialOrd + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Sequential `f64` dot product.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x.to_f64() * y.to_f64();
    }
    acc
}

/// Sequential `f64` L2 norm.
#[inline]
pub fn l2_norm<T: Real>(v: &[T]) -> f64 {
    dot(v, v).sqrt()
}

/// Index of the first non-finite entry, if any.
pub fn first_non_finite<T: Real>(v: &[T]) -> Option<usize> {
    v.iter().position(|x| !x.to_f64().is_finite())
}
