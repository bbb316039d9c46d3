use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean over the batch of `-log softmax(logits)[label]`, with its gradient
/// `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0, {k})")));
    }
    let inv_n = T::one() / T::from_usize(n.max(1)).unwrap();
    let mut grad = Tensor::zeros(&[n, k]);
    let mut total = T::zero();
    for ((row, g), &label) in logits
        .data()
        .chunks_exact(k)
        .zip(grad.data_mut().chunks_exact_mut(k))
        .zip(labels)
    {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - max).exp();
            sum += *gi;
        }
        total += sum.ln() - (row[label] - max);
        for gi in g.iter_mut() {
            *gi = *gi / sum * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Mean squared error over all elements; gradient `2 (pred - target) / count`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let count = T::from_usize(pred.len().max(1)).unwrap();
    let two = T::one() + T::one();
    let mut loss = T::zero();
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d * d;
            two * d / count
        })
        .collect();
    Ok((loss / count, Tensor::new(pred.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let (l, _) = softmax_cross_entropy(&t(&[1, 5], &[0.3; 5]), &[2]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_true_class_gives_zero_loss() {
        let (l, g) = softmax_cross_entropy(&t(&[1, 3], &[0.0, 1000.0, 0.0]), &[1]).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.all_finite());
    }

    #[test]
    fn two_class_hand_value() {
        let (l, g) = softmax_cross_entropy(&t(&[1, 2], &[1.0, 2.0]), &[1]).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
        let p0 = 1.0 / (1.0 + 1f64.exp());
        assert!((g.data()[0] - p0).abs() < 1e-12);
        assert!((g.data()[1] + p0).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let logits = [0.1, -2.0, 3.3, 0.7];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.25).collect();
        let (a, _) = softmax_cross_entropy(&t(&[1, 4], &logits), &[3]).unwrap();
        let (b, _) = softmax_cross_entropy(&t(&[1, 4], &shifted), &[3]).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        assert!(softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[2]).is_err());
    }

    #[test]
    fn mse_hand_values() {
        let (l, _) = mse_loss(&t(&[2], &[1.0, 2.0]), &t(&[2], &[1.0, 2.0])).unwrap();
        assert_eq!(l, 0.0);
        let (l, g) = mse_loss(&t(&[1], &[3.0]), &t(&[1], &[1.0])).unwrap();
        assert_eq!((l, g.data()[0]), (4.0, 4.0));
        let (l, _) = mse_loss(&t(&[2], &[1.0, 2.0]), &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(l, 2.5);
        assert!(mse_loss(&t(&[2], &[1.0, 2.0]), &t(&[1], &[0.0])).is_err());
    }
}
