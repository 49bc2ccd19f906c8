use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Real, Tensor, TensorError};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activate<T: Real>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let slope = T::of(LEAKY_SLOPE);
    match kind {
        Activation::Relu => input.map(|x| if x > T::zero() { x } else { T::zero() }),
        Activation::LeakyRelu => input.map(|x| if x > T::zero() { x } else { slope * x }),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

/// Gradient through an activation; `output` is only read for the sigmoid.
pub fn activate_backward<T: Real>(
    kind: Activation,
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let slope = T::of(LEAKY_SLOPE);
    match kind {
        Activation::Relu => input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() }),
        Activation::LeakyRelu => {
            input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { slope * g })
        }
        Activation::Sigmoid => output.zip_map(grad_out, |y, g| g * y * (T::one() - y)),
    }
}

/// Per-element multipliers applied by inverted dropout (0 or `1 / (1 - p)`).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T: Real>(Option<Vec<T>>);

impl<T: Real> DropoutMask<T> {
    pub fn identity() -> Self {
        Self(None)
    }

    pub fn kept_fraction(&self) -> f64 {
        match &self.0 {
            None => 1.0,
            Some(m) => m.iter().filter(|v| **v != T::zero()).count() as f64 / m.len() as f64,
        }
    }
}

/// Inverted dropout. Eval mode and `p == 0` are exact identities.
pub fn dropout<T: Real>(
    input: &Tensor<T>,
    p: f64,
    train: bool,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, DropoutMask<T>), TensorError> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Invalid(format!("dropout probability {p} not in [0, 1)")));
    }
    if !train || p == 0.0 {
        return Ok((input.clone(), DropoutMask::identity()));
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let out = Tensor::new(
        input.shape(),
        input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
    )?;
    Ok((out, DropoutMask(Some(mask))))
}

pub fn dropout_backward<T: Real>(
    mask: &DropoutMask<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    match &mask.0 {
        None => Ok(grad_out.clone()),
        Some(m) if m.len() == grad_out.len() => Tensor::new(
            grad_out.shape(),
            grad_out.data().iter().zip(m).map(|(&g, &k)| g * k).collect(),
        ),
        Some(m) => Err(TensorError::Shape(format!(
            "dropout mask of {} for gradient of {}",
            m.len(),
            grad_out.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn analytic_values() {
        let x = Tensor::<f64>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activate(&x, Activation::Sigmoid).data()[1], 0.5);
        assert_eq!(activate(&x, Activation::LeakyRelu).data(), &[-0.2, 0.0, 2.0]);
        assert_eq!(activate(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        let big = Tensor::<f32>::new(&[2], vec![-200.0, 200.0]).unwrap();
        let s = activate(&big, Activation::Sigmoid);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::<f64>::zeros(&[1]);
        let g = Tensor::full(&[1], 1.0);
        let y = activate(&x, Activation::Relu);
        assert_eq!(activate_backward(Activation::Relu, &x, &y, &g).unwrap().data(), &[0.0]);
    }

    #[test]
    fn eval_and_zero_rate_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::uniform(&[100], -1.0, 1.0, &mut rng);
        let (y, m) = dropout(&x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y, x);
        assert_eq!(m, DropoutMask::identity());
        let (y, _) = dropout(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn survivor_fraction_and_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f64>::uniform(&[1_000_000], 0.5, 1.5, &mut rng);
        let (y, mask) = dropout(&x, 0.5, true, &mut rng).unwrap();
        assert!((mask.kept_fraction() - 0.5).abs() <= 0.002);
        let mean_in = x.data().iter().sum::<f64>() / x.len() as f64;
        let mean_out = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((mean_out - mean_in).abs() / mean_in <= 0.005);
        let g = Tensor::full(&[1_000_000], 1.0);
        let back = dropout_backward(&mask, &g).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
