use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Tensors longer than this are checked on a random subset of this many coordinates.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(input index, coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` returns the scalar value and the analytic gradient for every input.
/// The per-coordinate error is `|a - n| / max(|a|, |n|, 1e-3 * g)` where `g`
/// is the largest gradient magnitude seen, so coordinates whose gradient is
/// negligible next to the rest are not judged on rounding noise alone.
pub fn grad_check<F>(inputs: &[Tensor<f64>], cfg: &GradCheckConfig, mut f: F) -> GradCheckReport
where
    F: FnMut(&[Tensor<f64>]) -> (f64, Vec<Vec<f64>>),
{
    let (_, analytic) = f(inputs);
    assert_eq!(analytic.len(), inputs.len(), "one gradient per input");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut pairs = Vec::new();
    for (ti, input) in inputs.iter().enumerate() {
        assert_eq!(analytic[ti].len(), input.len(), "gradient length for input {ti}");
        let coords: Vec<usize> = if input.len() <= cfg.max_coords {
            (0..input.len()).collect()
        } else {
            let mut c = sample(&mut rng, input.len(), cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + cfg.eps;
            let (plus, _) = f(&work);
            work[ti].data_mut()[j] = orig - cfg.eps;
            let (minus, _) = f(&work);
            work[ti].data_mut()[j] = orig;
            pairs.push((ti, j, analytic[ti][j], (plus - minus) / (2.0 * cfg.eps)));
        }
    }
    let scale = pairs
        .iter()
        .map(|&(_, _, a, n)| a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: pairs.len(),
        worst: (0, 0),
    };
    if scale == 0.0 {
        return report;
    }
    for (ti, j, a, n) in pairs {
        let denom = a.abs().max(n.abs()).max(1e-3 * scale);
        let err = (a - n).abs() / denom;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (ti, j);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let coeffs: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).cos()).collect();
        let x = Tensor::from_fn(&[20], |i| (i as f64 * 0.3).sin());
        let report = grad_check(&[x], &GradCheckConfig::default(), |xs| {
            let v = xs[0].data().iter().zip(&coeffs).map(|(a, b)| a * b).sum();
            (v, vec![coeffs.clone()])
        });
        assert_eq!(report.coords_checked, 20);
        assert!(report.max_rel_error <= 1e-10, "{}", report.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let x = Tensor::from_fn(&[30], |i| 0.1 + i as f64 * 0.05);
        let report = grad_check(&[x], &GradCheckConfig::default(), |xs| {
            let v = xs[0].data().iter().map(|a| a.powi(3)).sum();
            let g = xs[0].data().iter().map(|a| 1.01 * 3.0 * a * a).collect();
            (v, vec![g])
        });
        assert!(report.max_rel_error >= 5e-3);
    }

    #[test]
    fn large_inputs_are_subsampled() {
        let x = Tensor::from_fn(&[1000], |i| i as f64 * 1e-3);
        let cfg = GradCheckConfig {
            max_coords: 100,
            ..Default::default()
        };
        let report = grad_check(&[x], &cfg, |xs| {
            let v = xs[0].data().iter().map(|a| a * a).sum();
            (v, vec![xs[0].data().iter().map(|a| 2.0 * a).collect()])
        });
        assert_eq!(report.coords_checked, 100);
        assert!(report.max_rel_error < 1e-5);
    }
}
