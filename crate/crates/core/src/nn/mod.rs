//! Minimal CPU neural-network kernels backing the residual backbone.
//!
//! Everything here is deterministic: batch items are processed by
//! independent parallel workers and all cross-item reductions happen in a
//! fixed order (per-chunk partials folded sequentially), so results are
//! bitwise identical regardless of thread count. Kernels are generic over
//! `f32`/`f64`; the 64-bit instantiation exists for finite-difference
//! gradient verification.

pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;
pub mod relu;

pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use linear::Linear;
pub use loss::{cross_entropy_with_grad, softmax_rows};
pub use pool::{GlobalAvgPool, MaxPool2d};
pub use relu::Relu;

/// Scalar element type of the kernels.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(x: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
}

/// Fixed batch chunk size for parallel gradient reductions. Partial sums
/// are computed per chunk and folded in chunk order, which keeps results
/// independent of the number of worker threads.
pub(crate) const REDUCE_CHUNK: usize = 8;

/// Output spatial size of a strided window op: floor((n + 2p - k)/s) + 1.
pub fn out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[cfg(test)]
pub(crate) mod testutil {
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    pub fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    /// Central finite difference of `f` w.r.t. one scalar slot of `x`.
    pub fn central_diff(mut f: impl FnMut(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, idx: &[usize], h: f64) -> f64 {
        let mut plus = x.clone();
        plus[IxDyn(idx)] += h;
        let mut minus = x.clone();
        minus[IxDyn(idx)] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }
}
