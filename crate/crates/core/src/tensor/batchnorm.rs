use super::{Real, Tensor, TensorError};

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Real> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Values the backward pass needs.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Real> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
    dims: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T: Real> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Per-channel normalization over `(N, H, W)`.
///
/// In training mode the batch statistics (biased variance) normalize the
/// input and the running statistics move by `momentum` towards the batch
/// mean and unbiased batch variance. In eval mode the running statistics
/// are used unchanged.
pub fn batchnorm2d<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    train: bool,
) -> Result<(Tensor<T>, BatchNormCache<T>), TensorError> {
    let [n, c, h, w] = input.dims4()?;
    if gamma.len() != c || beta.len() != c || state.running_mean.len() != c {
        return Err(TensorError::Shape(format!(
            "batch norm over {c} channels with gamma {}, beta {}, state {}",
            gamma.len(),
            beta.len(),
            state.running_mean.len()
        )));
    }
    let plane = h * w;
    let count = n * plane;
    if train && count < 2 {
        return Err(TensorError::Invalid(
            "training-mode batch norm needs at least two values per channel".into(),
        ));
    }
    let x = input.data();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let channel = (0..n).flat_map(|b| {
            let base = (b * c + ch) * plane;
            base..base + plane
        });
        let (mean, var) = if train {
            let mut sum = 0.0;
            for i in channel.clone() {
                sum += x[i].as_f64();
            }
            let mean = sum / count as f64;
            let mut sq = 0.0;
            for i in channel.clone() {
                sq += (x[i].as_f64() - mean).powi(2);
            }
            let var = sq / count as f64;
            let m = state.momentum;
            let unbiased = var * count as f64 / (count - 1) as f64;
            state.running_mean[ch] =
                T::of((1.0 - m) * state.running_mean[ch].as_f64() + m * mean);
            state.running_var[ch] =
                T::of((1.0 - m) * state.running_var[ch].as_f64() + m * unbiased);
            (mean, var)
        } else {
            (
                state.running_mean[ch].as_f64(),
                state.running_var[ch].as_f64(),
            )
        };
        let istd = 1.0 / (var + state.eps).sqrt();
        inv_std[ch] = T::of(istd);
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        let mean_t = T::of(mean);
        for i in channel {
            let xh = (x[i] - mean_t) * inv_std[ch];
            normalized[i] = xh;
            out[i] = g * xh + bt;
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        BatchNormCache {
            normalized,
            inv_std,
            train,
            dims: [n, c, h, w],
        },
    ))
}

pub fn batchnorm2d_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>, TensorError> {
    let [n, c, h, w] = cache.dims;
    if grad_out.shape() != cache.dims {
        return Err(TensorError::Shape(format!(
            "gradient {:?} for batch norm over {:?}",
            grad_out.shape(),
            cache.dims
        )));
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let dy = grad_out.data();
    let xh = &cache.normalized;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let channel = (0..n).flat_map(|b| {
            let base = (b * c + ch) * plane;
            base..base + plane
        });
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for i in channel.clone() {
            sum_dy += dy[i].as_f64();
            sum_dy_xh += dy[i].as_f64() * xh[i].as_f64();
        }
        dgamma[ch] = T::of(sum_dy_xh);
        dbeta[ch] = T::of(sum_dy);
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        if cache.train {
            let mean_dy = T::of(sum_dy / count);
            let mean_dy_xh = T::of(sum_dy_xh / count);
            for i in channel {
                dx[i] = scale * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
            }
        } else {
            for i in channel {
                dx[i] = scale * dy[i];
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(&cache.dims, dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}
