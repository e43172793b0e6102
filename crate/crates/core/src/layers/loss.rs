use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the per-sample losses are reduced; decides the scale of the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
pub struct SoftmaxLoss<T: Scalar = f32> {
    /// `-sum_i log softmax(logits_i)[y_i]`
    pub sum: f64,
    /// `sum / n`
    pub mean: f64,
    /// Gradient of the chosen reduction with respect to the logits.
    pub grad: Tensor<T>,
}

impl<T: Scalar> SoftmaxLoss<T> {
    pub fn value(&self, reduction: Reduction) -> f64 {
        match reduction {
            Reduction::Sum => self.sum,
            Reduction::Mean => self.mean,
        }
    }
}

/// Softmax cross-entropy over `[n, classes]` logits.
///
/// Evaluated in `f64` with the row maximum subtracted; the log-partition is
/// `max + ln_1p(sum of the other exponentials)` so tiny losses keep full precision.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    reduction: Reduction,
) -> Result<SoftmaxLoss<T>> {
    let (n, classes) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(n * classes);
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Label { label: y, classes });
        }
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.f64()).collect();
        let top = (0..classes).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        let e: Vec<f64> = row.iter().map(|&v| (v - row[top]).exp()).collect();
        let rest: f64 = e.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, v)| v).sum();
        sum += (row[top] - row[y]) + rest.ln_1p();
        let z = 1.0 + rest;
        for (j, &ej) in e.iter().enumerate() {
            let g = if j != y {
                ej / z
            } else if j == top {
                -rest / z
            } else {
                ej / z - 1.0
            };
            grad.push(T::of(g * scale));
        }
    }
    Ok(SoftmaxLoss {
        sum,
        mean: sum / n as f64,
        grad: Tensor::from_vec(&[n, classes], grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Tensor<f64> {
        let c = rows[0].len();
        Tensor::from_vec(&[rows.len(), c], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let l = softmax_cross_entropy(&logits(&[&[0.3; 7], &[0.3; 7]]), &[2, 5], Reduction::Mean).unwrap();
        assert!((l.mean - 7f64.ln()).abs() < 1e-12);
        assert!((l.sum - 2.0 * 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_keep_precision() {
        // log1p(exp(-20)) and exp(-20)/(1+exp(-20)), evaluated independently
        let l = softmax_cross_entropy(&logits(&[&[10.0, -10.0]]), &[0], Reduction::Sum).unwrap();
        assert!((l.sum - 2.061153620314381e-9).abs() < 1e-20);
        assert!((l.grad.data()[0] + 2.0611536181902033e-9).abs() < 1e-20);
        assert!((l.grad.data()[1] - 2.0611536181902033e-9).abs() < 1e-20);
    }

    #[test]
    fn wrong_label_hand_value() {
        let l = softmax_cross_entropy(&logits(&[&[1.0, 0.0]]), &[1], Reduction::Mean).unwrap();
        assert!((l.mean - 1.3132616875182228).abs() < 1e-12);
    }

    #[test]
    fn mean_gradient_is_scaled_sum_gradient() {
        let x = logits(&[&[1.0, 2.0, -1.0], &[0.0, 0.5, 3.0]]);
        let s = softmax_cross_entropy(&x, &[0, 2], Reduction::Sum).unwrap();
        let m = softmax_cross_entropy(&x, &[0, 2], Reduction::Mean).unwrap();
        for (a, b) in s.grad.data().iter().zip(m.grad.data()) {
            assert!((a / 2.0 - b).abs() < 1e-15);
        }
        for r in 0..2 {
            assert!(s.grad.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_label() {
        let r = softmax_cross_entropy(&logits(&[&[1.0, 0.0]]), &[2], Reduction::Mean);
        assert!(matches!(r, Err(Error::Label { label: 2, classes: 2 })));
    }
}
