//! Fully connected layer.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::Scalar;

/// `y = x W^T + b` with weight layout `[out, in]`.
pub struct Linear<F> {
    pub name: String,
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub trainable: bool,
    pub grad_weight: Option<Array2<F>>,
    pub grad_bias: Option<Array1<F>>,
    cached_input: Option<Array2<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(name: String, weight: Array2<F>, bias: Array1<F>) -> Self {
        Linear {
            name,
            weight,
            bias,
            trainable: true,
            grad_weight: None,
            grad_bias: None,
            cached_input: None,
        }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> Array2<F> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn forward_train(&mut self, x: &ArrayView2<F>) -> Array2<F> {
        self.cached_input = Some(x.to_owned());
        self.forward(x)
    }

    pub fn backward(&mut self, dy: &ArrayView2<F>, need_dx: bool) -> Option<Array2<F>> {
        let x = self
            .cached_input
            .take()
            .expect("linear backward without forward_train");
        if self.trainable {
            self.grad_weight = Some(dy.t().dot(&x));
            self.grad_bias = Some(dy.sum_axis(Axis(0)));
        }
        need_dx.then(|| dy.dot(&self.weight))
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}
