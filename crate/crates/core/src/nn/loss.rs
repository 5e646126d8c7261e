use super::tensor::Tensor;
use super::NnError;

/// Mean squared error and its gradient `2 (pred - target) / N`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor), NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::Shape(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (loss, grad) = mse_slices(pred.data(), target.data())?;
    Ok((loss, Tensor::from_vec(pred.shape(), grad)?))
}

pub(crate) fn mse_slices(pred: &[f32], target: &[f32]) -> Result<(f64, Vec<f32>), NnError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NnError::Shape(format!("mse over {} vs {} values", pred.len(), target.len())));
    }
    let n = pred.len() as f32;
    let mut acc = 0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        acc += (d as f64) * (d as f64);
        grad.push(2.0 * d / n);
    }
    let loss = acc / pred.len() as f64;
    if !loss.is_finite() {
        return Err(NnError::NumericFault("mse"));
    }
    Ok((loss, grad))
}
