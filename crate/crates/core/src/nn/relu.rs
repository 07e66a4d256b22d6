//! Rectified linear unit with a cached sign mask for the backward pass.

use ndarray::{Array4, ArrayView4, Zip};

use super::Scalar;

pub struct Relu {
    mask: Option<Array4<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }

    pub fn forward<F: Scalar>(&self, x: &ArrayView4<F>) -> Array4<F> {
        x.mapv(|v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn forward_train<F: Scalar>(&mut self, x: &ArrayView4<F>) -> Array4<F> {
        let y = self.forward(x);
        self.mask = Some(y.mapv(|v| v > F::zero()));
        y
    }

    /// Applies the mask in place.
    pub fn backward<F: Scalar>(&mut self, dy: &mut Array4<F>) {
        let mask = self.mask.take().expect("relu backward without forward_train");
        Zip::from(dy).and(&mask).for_each(|d, &m| {
            if !m {
                *d = F::zero();
            }
        });
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}
