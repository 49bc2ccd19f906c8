use super::{Real, Tensor, TensorError};

/// Mean absolute difference.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::Shape(format!(
            "l1 loss between {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs().as_f64())
        .sum();
    Ok(T::of(sum / pred.len() as f64))
}

/// `sign(pred - target) / count`, with zero at ties.
pub fn l1_loss_backward<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let inv = T::of(1.0 / pred.len() as f64);
    pred.zip_map(target, |p, t| {
        if p > t {
            inv
        } else if p < t {
            -inv
        } else {
            T::zero()
        }
    })
}
