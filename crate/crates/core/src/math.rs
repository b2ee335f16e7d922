//! Shared numeric helpers. Internal to the crate; public behavior is
//! exercised through the modules that use these.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Numerically stable softmax of a vector.
pub(crate) fn softmax(v: ArrayView1<f64>) -> Array1<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = v.mapv(|x| (x - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|x| x / sum);
    out
}

/// Row-wise softmax of a matrix.
pub(crate) fn softmax_rows(m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Row-wise log-softmax, stable for large magnitudes.
pub(crate) fn log_softmax_rows(m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// Shannon entropy (nats) of a probability vector. Zero entries contribute
/// zero, matching the p ln p limit.
pub(crate) fn entropy(p: ArrayView1<f64>) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Frobenius norm.
pub(crate) fn frobenius_norm(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean cross-entropy (nats) between integer labels and row-wise logits.
pub(crate) fn cross_entropy_mean(logits: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let log_probs = log_softmax_rows(logits);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_probs[[i, y]])
        .sum();
    total / labels.len() as f64
}

/// Gradient of [`cross_entropy_mean`] with respect to the logits:
/// (softmax - one_hot) / batch.
pub(crate) fn cross_entropy_grad(logits: ArrayView2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut grad = softmax_rows(logits);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|x| x / n);
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_sums_to_one_and_orders() {
        let p = softmax(array![1.0, 2.0, 3.0].view());
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let a = softmax(array![1.0, 2.0, 3.0].view());
        let b = softmax(array![1001.0, 1002.0, 1003.0].view());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_of_uniform_is_ln_k() {
        let k = 8;
        let p = Array1::from_elem(k, 1.0 / k as f64);
        assert!((entropy(p.view()) - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_point_mass_is_zero() {
        let p = array![0.0, 1.0, 0.0];
        assert_eq!(entropy(p.view()), 0.0);
    }

    #[test]
    fn cross_entropy_grad_matches_finite_difference() {
        let logits = array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]];
        let labels = [2usize, 0usize];
        let grad = cross_entropy_grad(logits.view(), &labels);
        let eps = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut plus = logits.clone();
                plus[[i, j]] += eps;
                let mut minus = logits.clone();
                minus[[i, j]] -= eps;
                let fd = (cross_entropy_mean(plus.view(), &labels)
                    - cross_entropy_mean(minus.view(), &labels))
                    / (2.0 * eps);
                assert!(
                    (fd - grad[[i, j]]).abs() < 1e-8,
                    "grad mismatch at ({i},{j}): fd={fd}, analytic={}",
                    grad[[i, j]]
                );
            }
        }
    }
}
