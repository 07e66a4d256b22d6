//! Softmax and cross-entropy with a fused, numerically stable gradient.

use ndarray::{Array2, ArrayView2, Axis};

use super::Scalar;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(logits: &ArrayView2<F>) -> Array2<F> {
    let mut probs = logits.to_owned();
    for mut row in probs.axis_iter_mut(Axis(0)) {
        let max = row.fold(F::neg_infinity(), |a, &b| if b > a { b } else { a });
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
/// `targets` are class indices into the logit columns.
pub fn cross_entropy_with_grad<F: Scalar>(
    logits: &ArrayView2<F>,
    targets: &[usize],
) -> (F, Array2<F>) {
    let n = logits.nrows();
    assert_eq!(n, targets.len(), "batch/target length mismatch");
    let inv_n = F::one() / F::from_f64(n as f64);

    let mut grad = softmax_rows(logits);
    let mut loss = F::zero();
    for (i, (mut row, &t)) in grad.axis_iter_mut(Axis(0)).zip(targets.iter()).enumerate() {
        debug_assert!(t < row.len(), "target out of range at sample {i}");
        let p = row[t];
        // p is strictly positive after softmax; clamp guards the log anyway.
        let floor = F::from_f64(1e-30);
        loss -= (if p > floor { p } else { floor }).ln();
        row[t] -= F::one();
        row.mapv_inplace(|v| v * inv_n);
    }
    (loss * inv_n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one_and_handle_large_logits() {
        let logits = array![[1000.0f64, 998.0], [-5.0, 3.0]];
        let p = softmax_rows(&logits.view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(p[(0, 0)] > p[(0, 1)]);
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        // Two samples, logits chosen so probabilities are easy to verify.
        let logits = array![[0.0f64, 0.0], [2.0, 0.0]];
        let (loss, grad) = cross_entropy_with_grad(&logits.view(), &[1, 0]);
        let p0 = 0.5f64;
        let p1 = (2.0f64).exp() / ((2.0f64).exp() + 1.0);
        let expected = -(p0.ln() + p1.ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        // grad = (softmax - onehot)/n
        assert!((grad[(0, 1)] - (0.5 - 1.0) / 2.0).abs() < 1e-12);
        assert!((grad[(1, 0)] - (p1 - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = array![[0.3f64, -0.7], [1.2, 0.4], [-0.1, 0.9]];
        let targets = [0usize, 1, 1];
        let (_, grad) = cross_entropy_with_grad(&logits.view(), &targets);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut lp = logits.clone();
                lp[(i, j)] += h;
                let mut lm = logits.clone();
                lm[(i, j)] -= h;
                let (fp, _) = cross_entropy_with_grad(&lp.view(), &targets);
                let (fm, _) = cross_entropy_with_grad(&lm.view(), &targets);
                let fd = (fp - fm) / (2.0 * h);
                assert!((grad[(i, j)] - fd).abs() < 1e-8);
            }
        }
    }
}
