use rand::Rng;

use super::Tensor;
use crate::seed::rng_from;

pub const FD_STEP: f32 = 1e-2;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central differences of a scalar loss with respect to every element of `x`.
pub fn fd_gradient(x: &Tensor, loss: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = loss(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = loss(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP as f64)
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`, zero when both vanish.
pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (*a as f64 - b).powi(2))
        .sum();
    let norm: f64 = numeric.iter().map(|b| b * b).sum();
    if norm == 0.0 {
        diff.sqrt()
    } else {
        (diff / norm).sqrt()
    }
}
