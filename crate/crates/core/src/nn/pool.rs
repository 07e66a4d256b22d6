//! Max pooling and global average pooling.

use ndarray::{Array2, Array4, ArrayView4, Axis, Zip};

use super::{out_size, Scalar};

/// Max pooling without padding ("valid"), the convention of the reference
/// backbone family: 112 -> 55 for a 3x3 stride-2 window.
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    argmax: Option<Array4<u32>>,
    input_spatial: (usize, usize),
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            argmax: None,
            input_spatial: (0, 0),
        }
    }

    pub fn output_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_size(h, self.kernel, self.stride, 0),
            out_size(w, self.kernel, self.stride, 0),
        )
    }

    pub fn forward<F: Scalar>(&self, x: &ArrayView4<F>) -> Array4<F> {
        self.run(x).0
    }

    pub fn forward_train<F: Scalar>(&mut self, x: &ArrayView4<F>) -> Array4<F> {
        let (y, argmax) = self.run(x);
        self.argmax = Some(argmax);
        self.input_spatial = (x.dim().2, x.dim().3);
        y
    }

    fn run<F: Scalar>(&self, x: &ArrayView4<F>) -> (Array4<F>, Array4<u32>) {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.output_spatial(h, w);
        let mut y = Array4::<F>::zeros((n, c, ho, wo));
        let mut argmax = Array4::<u32>::zeros((n, c, ho, wo));
        Zip::from(y.axis_iter_mut(Axis(0)))
            .and(argmax.axis_iter_mut(Axis(0)))
            .and(x.axis_iter(Axis(0)))
            .par_for_each(|mut y_img, mut am_img, x_img| {
                for ci in 0..c {
                    let plane = x_img.index_axis(Axis(0), ci);
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = F::neg_infinity();
                            let mut best_idx = 0u32;
                            for ki in 0..self.kernel {
                                for kj in 0..self.kernel {
                                    let iy = oy * self.stride + ki;
                                    let ix = ox * self.stride + kj;
                                    let v = plane[(iy, ix)];
                                    if v > best {
                                        best = v;
                                        best_idx = (iy * w + ix) as u32;
                                    }
                                }
                            }
                            y_img[(ci, oy, ox)] = best;
                            am_img[(ci, oy, ox)] = best_idx;
                        }
                    }
                }
            });
        (y, argmax)
    }

    pub fn backward<F: Scalar>(&mut self, dy: &ArrayView4<F>) -> Array4<F> {
        let argmax = self.argmax.take().expect("pool backward without forward_train");
        let (n, c, ho, wo) = dy.dim();
        let (h, w) = self.input_spatial;
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        Zip::from(dx.axis_iter_mut(Axis(0)))
            .and(dy.axis_iter(Axis(0)))
            .and(argmax.axis_iter(Axis(0)))
            .par_for_each(|mut dx_img, dy_img, am_img| {
                for ci in 0..c {
                    let mut dplane = dx_img.index_axis_mut(Axis(0), ci);
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let lin = am_img[(ci, oy, ox)] as usize;
                            dplane[(lin / w, lin % w)] += dy_img[(ci, oy, ox)];
                        }
                    }
                }
            });
        dx
    }

    pub fn clear_cache(&mut self) {
        self.argmax = None;
    }
}

/// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
pub struct GlobalAvgPool {
    input_spatial: (usize, usize),
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { input_spatial: (0, 0) }
    }

    pub fn forward<F: Scalar>(&self, x: &ArrayView4<F>) -> Array2<F> {
        let (n, c, h, w) = x.dim();
        let scale = F::one() / F::from_f64((h * w) as f64);
        let mut y = Array2::<F>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                y[(ni, ci)] = x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum() * scale;
            }
        }
        y
    }

    pub fn forward_train<F: Scalar>(&mut self, x: &ArrayView4<F>) -> Array2<F> {
        self.input_spatial = (x.dim().2, x.dim().3);
        self.forward(x)
    }

    pub fn backward<F: Scalar>(&self, dy: &Array2<F>) -> Array4<F> {
        let (n, c) = dy.dim();
        let (h, w) = self.input_spatial;
        let scale = F::one() / F::from_f64((h * w) as f64);
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = dy[(ni, ci)] * scale;
                dx.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .fill(g);
            }
        }
        dx
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::rand_array;
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn maxpool_valid_110_to_54_convention() {
        let pool = MaxPool2d::new(3, 2);
        assert_eq!(pool.output_spatial(112, 112), (55, 55));
        assert_eq!(pool.output_spatial(7, 7), (3, 3));
    }

    #[test]
    fn maxpool_forward_and_backward_route_to_argmax() {
        let x = rand_array(&[1, 1, 5, 5], 31);
        let mut pool = MaxPool2d::new(3, 2);
        let x4 = x.view().into_dimensionality().unwrap();
        let y = pool.forward_train(&x4);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        // each output is the max of its window
        for oy in 0..2 {
            for ox in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for ki in 0..3 {
                    for kj in 0..3 {
                        best = best.max(x[IxDyn(&[0, 0, oy * 2 + ki, ox * 2 + kj])]);
                    }
                }
                assert_eq!(y[(0, 0, oy, ox)], best);
            }
        }
        let dy = Array4::<f64>::ones((1, 1, 2, 2));
        let dx = pool.backward(&dy.view());
        assert_eq!(dx.sum(), 4.0); // each output cell routes one unit back
    }

    #[test]
    fn gap_forward_backward() {
        let x = rand_array(&[2, 3, 4, 4], 32);
        let mut gap = GlobalAvgPool::new();
        let x4 = x.view().into_dimensionality().unwrap();
        let y = gap.forward_train(&x4);
        assert!((y[(1, 2)] - x4.index_axis(Axis(0), 1).index_axis(Axis(0), 2).mean().unwrap()).abs() < 1e-12);
        let mut dy = Array2::<f64>::zeros((2, 3));
        dy[(0, 1)] = 16.0;
        let dx = gap.backward(&dy);
        assert_eq!(dx[(0, 1, 2, 2)], 1.0);
        assert_eq!(dx[(1, 1, 2, 2)], 0.0);
    }
}
