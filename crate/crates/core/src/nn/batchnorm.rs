//! Channel-wise batch normalization.
//!
//! A trainable layer normalizes with batch statistics during training and
//! keeps running estimates for inference. A frozen layer always normalizes
//! with its stored running statistics and never updates them, so frozen
//! blocks cannot drift.

use ndarray::{Array1, Array4, ArrayView4, Axis, Zip};
use rayon::prelude::*;

use super::Scalar;

pub struct BatchNorm2d<F> {
    pub name: String,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: F,
    pub eps: F,
    pub trainable: bool,
    pub grad_gamma: Option<Array1<F>>,
    pub grad_beta: Option<Array1<F>>,
    cache: Option<BatchCache<F>>,
}

struct BatchCache<F> {
    normalized: Array4<F>,
    inv_std: Array1<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(name: String, channels: usize) -> Self {
        BatchNorm2d {
            name,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: F::from_f64(0.1),
            eps: F::from_f64(1e-5),
            trainable: true,
            grad_gamma: None,
            grad_beta: None,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Inference normalization with running statistics.
    pub fn forward(&self, x: &ArrayView4<F>) -> Array4<F> {
        let mut y = x.to_owned();
        let c = self.channels();
        let scale: Vec<F> = (0..c)
            .map(|ci| self.gamma[ci] / (self.running_var[ci] + self.eps).sqrt())
            .collect();
        Zip::indexed(y.axis_iter_mut(Axis(1))).par_for_each(|ci, mut plane| {
            let (s, m, b) = (scale[ci], self.running_mean[ci], self.beta[ci]);
            plane.mapv_inplace(|v| (v - m) * s + b);
        });
        y
    }

    pub fn forward_train(&mut self, x: &ArrayView4<F>) -> Array4<F> {
        if !self.trainable {
            return self.forward(x);
        }
        let (n, c, h, w) = x.dim();
        let count = F::from_f64((n * h * w) as f64);

        let mut mean = Array1::<F>::zeros(c);
        let mut var = Array1::<F>::zeros(c);
        // Two-pass batch statistics, parallel over channels.
        let stats: Vec<(F, F)> = x
            .axis_iter(Axis(1))
            .into_par_iter()
            .map(|plane| {
                let m = plane.sum() / count;
                let v = plane.fold(F::zero(), |acc, &v| acc + (v - m) * (v - m)) / count;
                (m, v)
            })
            .collect();
        for (ci, (m, v)) in stats.into_iter().enumerate() {
            mean[ci] = m;
            var[ci] = v;
        }

        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let mut normalized = x.to_owned();
        Zip::indexed(normalized.axis_iter_mut(Axis(1))).par_for_each(|ci, mut plane| {
            let (m, is) = (mean[ci], inv_std[ci]);
            plane.mapv_inplace(|v| (v - m) * is);
        });

        let mut y = normalized.clone();
        Zip::indexed(y.axis_iter_mut(Axis(1))).par_for_each(|ci, mut plane| {
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            plane.mapv_inplace(|v| v * g + b);
        });

        let one = F::one();
        Zip::from(&mut self.running_mean)
            .and(&mean)
            .for_each(|r, &m| *r = (one - self.momentum) * *r + self.momentum * m);
        Zip::from(&mut self.running_var)
            .and(&var)
            .for_each(|r, &v| *r = (one - self.momentum) * *r + self.momentum * v);

        self.cache = Some(BatchCache { normalized, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &ArrayView4<F>) -> Array4<F> {
        if !self.trainable {
            // Running-statistics mode: a per-channel affine map.
            let c = self.channels();
            let scale: Vec<F> = (0..c)
                .map(|ci| self.gamma[ci] / (self.running_var[ci] + self.eps).sqrt())
                .collect();
            let mut dx = dy.to_owned();
            Zip::indexed(dx.axis_iter_mut(Axis(1))).par_for_each(|ci, mut plane| {
                let s = scale[ci];
                plane.mapv_inplace(|v| v * s);
            });
            return dx;
        }

        let cache = self.cache.take().expect("bn backward without forward_train");
        let (n, c, h, w) = dy.dim();
        let count = F::from_f64((n * h * w) as f64);

        let sums: Vec<(F, F)> = dy
            .axis_iter(Axis(1))
            .into_par_iter()
            .zip(cache.normalized.axis_iter(Axis(1)).into_par_iter())
            .map(|(dy_plane, xn_plane)| {
                let mut s_dy = F::zero();
                let mut s_dyx = F::zero();
                Zip::from(&dy_plane).and(&xn_plane).for_each(|&d, &xn| {
                    s_dy += d;
                    s_dyx += d * xn;
                });
                (s_dy, s_dyx)
            })
            .collect();

        let mut grad_beta = Array1::<F>::zeros(c);
        let mut grad_gamma = Array1::<F>::zeros(c);
        for (ci, (s_dy, s_dyx)) in sums.iter().enumerate() {
            grad_beta[ci] = *s_dy;
            grad_gamma[ci] = *s_dyx;
        }

        let mut dx = dy.to_owned();
        Zip::indexed(dx.axis_iter_mut(Axis(1)))
            .and(cache.normalized.axis_iter(Axis(1)))
            .par_for_each(|ci, mut plane, xn_plane| {
                let g_is = self.gamma[ci] * cache.inv_std[ci];
                let mean_dy = grad_beta[ci] / count;
                let mean_dyx = grad_gamma[ci] / count;
                Zip::from(&mut plane).and(&xn_plane).for_each(|d, &xn| {
                    *d = g_is * (*d - mean_dy - xn * mean_dyx);
                });
            });

        self.grad_gamma = Some(grad_gamma);
        self.grad_beta = Some(grad_beta);
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{rand_array, rel_err};
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn bn_loss(x: &ArrayD<f64>, gamma: &ArrayD<f64>, beta: &ArrayD<f64>, r: &ArrayD<f64>) -> f64 {
        let mut bn = BatchNorm2d::<f64>::new("t".into(), gamma.len());
        bn.gamma.assign(&gamma.view().into_dimensionality::<ndarray::Ix1>().unwrap());
        bn.beta.assign(&beta.view().into_dimensionality::<ndarray::Ix1>().unwrap());
        let y = bn.forward_train(&x.view().into_dimensionality().unwrap());
        (&y.into_dyn() * r).sum()
    }

    fn central(mut f: impl FnMut(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, idx: &[usize], h: f64) -> f64 {
        let mut p = x.clone();
        p[IxDyn(idx)] += h;
        let mut m = x.clone();
        m[IxDyn(idx)] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    }

    #[test]
    fn train_mode_gradients_match_finite_differences() {
        let x = rand_array(&[3, 2, 4, 4], 11);
        let gamma = rand_array(&[2], 12).mapv(|v| v + 1.5);
        let beta = rand_array(&[2], 13);
        let r = rand_array(&[3, 2, 4, 4], 14);

        let mut bn = BatchNorm2d::<f64>::new("t".into(), 2);
        bn.gamma.assign(&gamma.view().into_dimensionality::<ndarray::Ix1>().unwrap());
        bn.beta.assign(&beta.view().into_dimensionality::<ndarray::Ix1>().unwrap());
        bn.forward_train(&x.view().into_dimensionality().unwrap());
        let dx = bn.backward(&r.view().into_dimensionality().unwrap());
        let dg = bn.grad_gamma.clone().unwrap();
        let db = bn.grad_beta.clone().unwrap();

        for idx in [[0usize, 0, 0, 0], [2, 1, 3, 2], [1, 0, 2, 1]] {
            let fd = central(|xp| bn_loss(xp, &gamma, &beta, &r), &x, &idx, 1e-6);
            assert!(
                rel_err(dx[(idx[0], idx[1], idx[2], idx[3])], fd) < 1e-6,
                "dx mismatch at {idx:?}"
            );
        }
        for ci in 0..2 {
            let fd_g = central(|gp| bn_loss(&x, gp, &beta, &r), &gamma, &[ci], 1e-6);
            let fd_b = central(|bp| bn_loss(&x, &gamma, bp, &r), &beta, &[ci], 1e-6);
            assert!(rel_err(dg[ci], fd_g) < 1e-6);
            assert!(rel_err(db[ci], fd_b) < 1e-6);
        }
    }

    #[test]
    fn frozen_layer_uses_running_stats_and_never_updates_them() {
        let x = rand_array(&[2, 3, 3, 3], 20);
        let mut bn = BatchNorm2d::<f64>::new("t".into(), 3);
        bn.running_mean.fill(0.25);
        bn.running_var.fill(2.0);
        bn.trainable = false;
        let before_mean = bn.running_mean.clone();
        let before_var = bn.running_var.clone();

        let y = bn.forward_train(&x.view().into_dimensionality().unwrap());
        assert_eq!(bn.running_mean, before_mean);
        assert_eq!(bn.running_var, before_var);

        let expected = (x[IxDyn(&[0, 1, 0, 0])] - 0.25) / (2.0f64 + 1e-5).sqrt();
        assert!((y[(0, 1, 0, 0)] - expected).abs() < 1e-12);

        // Backward is the matching affine scale.
        let dy = rand_array(&[2, 3, 3, 3], 21);
        let dx = bn.backward(&dy.view().into_dimensionality().unwrap());
        let scale = 1.0 / (2.0f64 + 1e-5).sqrt();
        assert!((dx[(1, 2, 1, 1)] - dy[IxDyn(&[1, 2, 1, 1])] * scale).abs() < 1e-12);
        assert!(bn.grad_gamma.is_none());
    }

    #[test]
    fn training_updates_running_statistics() {
        let x = rand_array(&[4, 1, 2, 2], 22).mapv(|v| v + 3.0);
        let mut bn = BatchNorm2d::<f64>::new("t".into(), 1);
        bn.forward_train(&x.view().into_dimensionality().unwrap());
        // running = 0.9*init + 0.1*batch; batch mean is near 3.
        assert!(bn.running_mean[0] > 0.2);
        assert!((bn.running_var[0] - (0.9 + 0.1 * x.var(0.0))).abs() < 0.2);
    }
}
