use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over rows of `logits` and its gradient.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (rows, classes) = (logits.rows(), logits.row_len());
    if labels.len() != rows {
        return Err(Error::Argument(format!("{} labels for {rows} rows", labels.len())));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Argument(format!("label {label} out of range for {classes} classes")));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        total += denom.ln() + max - row[label] as f64;
        let g = grad.row_mut(r);
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (row[c] as f64 - max).exp() / denom;
            let target = if c == label { 1.0 } else { 0.0 };
            *gv = ((p - target) / rows as f64) as f32;
        }
    }
    Ok(((total / rows as f64) as f32, grad))
}

/// Mean squared error over all elements and its gradient w.r.t. `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Argument(format!(
            "mse shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0f64;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p as f64 - t as f64;
        total += d * d;
        *g = (2.0 * d / n) as f32;
    }
    Ok(((total / n) as f32, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f32.ln()).abs() < 1e-6);
        assert!((grad.data()[0] - (0.25 - 1.0) / 2.0).abs() < 1e-7);
        assert!(softmax_cross_entropy(&logits, &[0, 4]).is_err());
    }

    #[test]
    fn mse_value_and_gradient() {
        let p = Tensor::vector(vec![1.0, 3.0]);
        let t = Tensor::vector(vec![0.0, 0.0]);
        let (l, g) = mse(&p, &t).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g.data(), &[1.0, 3.0]);
    }
}
