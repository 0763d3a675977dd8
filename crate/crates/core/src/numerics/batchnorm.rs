use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Variance floor added under the square root.
pub const BN_EPS: f32 = 1e-5;
/// Weight of the newest batch in the running-statistics average.
pub const BN_MOMENTUM: f32 = 0.1;

/// Per-channel parameters of one normalization site.
///
/// `var` holds the running variance; the normalizing scale is
/// `sqrt(var + eps)` at every use site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl BnParams {
    /// Identity normalization: mean 0, variance 1, scale 1, shift 0.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        let c = self.channels();
        if c != channels || self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(invalid(format!(
                "normalization site has {c} channels, input has {channels}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    /// Normalize by batch statistics and fold them into the running average.
    Train { momentum: f32 },
    /// Normalize by the stored running statistics.
    Eval,
}

/// Saved state for [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache {
    mode: BnMode,
    shape: [usize; 4],
    x_hat: Vec<f32>,
    inv_std: Vec<f32>,
    gamma: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Eval-mode normalization. Never mutates `params`.
pub fn batchnorm_eval(input: &Tensor, params: &BnParams, eps: f32) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    params.check(c)?;
    let hw = h * w;
    let mut scale = vec![0.0f32; c];
    for ch in 0..c {
        let var = params.var[ch];
        if !(var >= 0.0) || !(var + eps > 0.0) {
            return Err(Error::CorruptedBank(format!(
                "channel {ch} has non-positive scale (variance {var})"
            )));
        }
        scale[ch] = 1.0 / (var + eps).sqrt();
    }
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (mu, s, g, be) = (
                params.mean[ch],
                scale[ch],
                params.gamma[ch],
                params.beta[ch],
            );
            for i in base..base + hw {
                out[i] = g * ((x[i] - mu) * s) + be;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Normalization in either mode. In train mode only the running `mean` and
/// `var` of `params` are updated.
pub fn batchnorm_forward(
    input: &Tensor,
    params: &mut BnParams,
    mode: BnMode,
    eps: f32,
) -> Result<(Tensor, BnCache)> {
    let (n, c, h, w) = input.dims4()?;
    params.check(c)?;
    let momentum = match mode {
        BnMode::Eval => {
            let out = batchnorm_eval(input, params, eps)?;
            let cache = BnCache {
                mode,
                shape: [n, c, h, w],
                x_hat: Vec::new(),
                inv_std: Vec::new(),
                gamma: params.gamma.clone(),
            };
            return Ok((out, cache));
        }
        BnMode::Train { momentum } => momentum,
    };
    let hw = h * w;
    let m = n * hw;
    if m < 2 {
        return Err(invalid(
            "train-mode normalization needs at least two values per channel",
        ));
    }
    let x = input.data();
    let mut x_hat = vec![0.0f32; x.len()];
    let mut out = vec![0.0f32; x.len()];
    let mut inv_std = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            sum += x[base..base + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / m as f64;
        let mut sq = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            sq += x[base..base + hw]
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>();
        }
        let var = sq / m as f64;
        let is = 1.0 / (var + eps as f64).sqrt();
        inv_std[ch] = is as f32;
        let (g, be) = (params.gamma[ch], params.beta[ch]);
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = ((x[i] as f64 - mean) * is) as f32;
                x_hat[i] = xh;
                out[i] = g * xh + be;
            }
        }
        let unbiased = sq / (m - 1) as f64;
        params.mean[ch] = (1.0 - momentum) * params.mean[ch] + momentum * mean as f32;
        params.var[ch] = (1.0 - momentum) * params.var[ch] + momentum * unbiased as f32;
    }
    let cache = BnCache {
        mode,
        shape: [n, c, h, w],
        x_hat,
        inv_std,
        gamma: params.gamma.clone(),
    };
    Ok((Tensor::new(input.shape().to_vec(), out)?, cache))
}

/// Exact gradients of train-mode normalization, including the dependence of
/// the batch statistics on the input.
pub fn batchnorm_backward(grad_out: &Tensor, cache: &BnCache) -> Result<BnGrads> {
    if cache.mode == BnMode::Eval {
        return Err(invalid("backward requires a train-mode forward cache"));
    }
    let [n, c, h, w] = cache.shape;
    if grad_out.shape() != cache.shape {
        return Err(invalid(format!(
            "grad_out shape {:?} does not match forward shape {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let g = grad_out.data();
    let mut grad_gamma = vec![0.0f32; c];
    let mut grad_beta = vec![0.0f32; c];
    let mut grad_in = vec![0.0f32; g.len()];
    for ch in 0..c {
        let mut dbeta = 0.0f64;
        let mut dgamma = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dbeta += g[i] as f64;
                dgamma += g[i] as f64 * cache.x_hat[i] as f64;
            }
        }
        grad_beta[ch] = dbeta as f32;
        grad_gamma[ch] = dgamma as f32;
        let k = cache.gamma[ch] as f64 * cache.inv_std[ch] as f64 / m;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                grad_in[i] =
                    (k * (m * g[i] as f64 - dbeta - cache.x_hat[i] as f64 * dgamma)) as f32;
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(grad_out.shape().to_vec(), grad_in)?,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::{fd_gradient, random_tensor, relative_error, FD_STEP};

    #[test]
    fn eval_identity_params_pass_input_through() {
        let x = random_tensor(&[2, 3, 4, 4], 1);
        let p = BnParams::identity(3);
        assert_eq!(batchnorm_eval(&x, &p, 0.0).unwrap(), x);
    }

    #[test]
    fn eval_direct_arithmetic() {
        let x = Tensor::filled(&[1, 1, 1, 1], 3.0);
        let p = BnParams {
            mean: vec![1.0],
            var: vec![4.0],
            gamma: vec![2.0],
            beta: vec![1.0],
        };
        let y = batchnorm_eval(&x, &p, 0.0).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn eval_rejects_negative_variance() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let mut p = BnParams::identity(1);
        p.var[0] = -1.0;
        assert!(matches!(
            batchnorm_eval(&x, &p, BN_EPS),
            Err(Error::CorruptedBank(_))
        ));
        p.var[0] = 0.0;
        assert!(matches!(
            batchnorm_eval(&x, &p, 0.0),
            Err(Error::CorruptedBank(_))
        ));
    }

    #[test]
    fn train_on_standardized_batch_is_identity() {
        // Per channel: values ±1 → mean 0, biased variance 1.
        let data = vec![1.0, -1.0, -1.0, 1.0, 2.0, -2.0, 0.0, 0.0];
        let x = Tensor::new(vec![2, 1, 2, 2], data.clone()).unwrap();
        let scaled: Vec<f32> = vec![1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0];
        let x2 = Tensor::new(vec![2, 1, 2, 2], scaled.clone()).unwrap();
        let mut p = BnParams::identity(1);
        let (y, _) = batchnorm_forward(&x2, &mut p, BnMode::Train { momentum: 0.1 }, 0.0).unwrap();
        assert_eq!(y.data(), &scaled[..]);
        // Non-standardized batch must change.
        let (y, _) = batchnorm_forward(&x, &mut p, BnMode::Train { momentum: 0.1 }, 0.0).unwrap();
        assert_ne!(y.data(), &data[..]);
    }

    #[test]
    fn train_updates_only_running_statistics() {
        let x = random_tensor(&[4, 2, 3, 3], 7);
        let mut p = BnParams::identity(2);
        p.gamma = vec![1.5, 0.5];
        p.beta = vec![0.2, -0.3];
        let before = p.clone();
        batchnorm_forward(&x, &mut p, BnMode::Train { momentum: 0.1 }, BN_EPS).unwrap();
        assert_eq!(p.gamma, before.gamma);
        assert_eq!(p.beta, before.beta);
        assert_ne!(p.mean, before.mean);
        assert_ne!(p.var, before.var);
        let frozen = p.clone();
        batchnorm_forward(&x, &mut p, BnMode::Eval, BN_EPS).unwrap();
        assert_eq!(p, frozen);
    }

    #[test]
    fn running_average_uses_momentum() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut p = BnParams::identity(1);
        batchnorm_forward(&x, &mut p, BnMode::Train { momentum: 0.1 }, BN_EPS).unwrap();
        // batch mean 2, unbiased variance 2
        assert!((p.mean[0] - 0.2).abs() < 1e-7);
        assert!((p.var[0] - (0.9 + 0.2)).abs() < 1e-6);
    }

    #[test]
    fn train_needs_two_values() {
        let x = Tensor::zeros(&[1, 1, 1, 1]);
        let mut p = BnParams::identity(1);
        assert!(batchnorm_forward(&x, &mut p, BnMode::Train { momentum: 0.1 }, BN_EPS).is_err());
    }

    #[test]
    fn backward_zero_grad_and_beta_sum() {
        let x = random_tensor(&[2, 3, 4, 4], 3);
        let mut p = BnParams::identity(3);
        let (_, cache) =
            batchnorm_forward(&x, &mut p, BnMode::Train { momentum: 0.1 }, BN_EPS).unwrap();
        let z = batchnorm_backward(&Tensor::zeros(&[2, 3, 4, 4]), &cache).unwrap();
        assert!(z
            .input
            .data()
            .iter()
            .chain(&z.gamma)
            .chain(&z.beta)
            .all(|&v| v == 0.0));

        let g = random_tensor(&[2, 3, 4, 4], 4);
        let grads = batchnorm_backward(&g, &cache).unwrap();
        for ch in 0..3 {
            let mut s = 0.0f64;
            for b in 0..2 {
                s += g.data()[(b * 3 + ch) * 16..(b * 3 + ch + 1) * 16]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            assert!((grads.beta[ch] as f64 - s).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_rejects_eval_cache() {
        let x = random_tensor(&[2, 1, 2, 2], 3);
        let mut p = BnParams::identity(1);
        let (_, cache) = batchnorm_forward(&x, &mut p, BnMode::Eval, BN_EPS).unwrap();
        assert!(batchnorm_backward(&x, &cache).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..6u64 {
            let x = random_tensor(&[2, 3, 4, 4], seed);
            let w = random_tensor(&[2, 3, 4, 4], seed + 10);
            let gamma = random_tensor(&[3], seed + 20)
                .data()
                .iter()
                .map(|v| v + 1.5)
                .collect();
            let beta = random_tensor(&[3], seed + 30).into_data();
            let params = BnParams {
                mean: vec![0.0; 3],
                var: vec![1.0; 3],
                gamma,
                beta,
            };
            let loss_at = |x: &Tensor, p: &BnParams| -> f64 {
                let mut p = p.clone();
                let (y, _) =
                    batchnorm_forward(x, &mut p, BnMode::Train { momentum: 0.1 }, BN_EPS).unwrap();
                y.data()
                    .iter()
                    .zip(w.data())
                    .map(|(a, b)| (*a as f64) * (*b as f64))
                    .sum()
            };
            let mut p = params.clone();
            let (_, cache) =
                batchnorm_forward(&x, &mut p, BnMode::Train { momentum: 0.1 }, BN_EPS).unwrap();
            let grads = batchnorm_backward(&w, &cache).unwrap();

            let numeric_x = fd_gradient(&x, |xp| loss_at(xp, &params));
            assert!(relative_error(grads.input.data(), &numeric_x) < 1e-3);

            let fd_param = |which: usize| -> Vec<f64> {
                (0..3)
                    .map(|ch| {
                        let mut up = params.clone();
                        let mut down = params.clone();
                        let (u, d) = if which == 0 {
                            (&mut up.gamma, &mut down.gamma)
                        } else {
                            (&mut up.beta, &mut down.beta)
                        };
                        u[ch] += FD_STEP;
                        d[ch] -= FD_STEP;
                        (loss_at(&x, &up) - loss_at(&x, &down)) / (2.0 * FD_STEP as f64)
                    })
                    .collect()
            };
            assert!(relative_error(&grads.gamma, &fd_param(0)) < 1e-3);
            assert!(relative_error(&grads.beta, &fd_param(1)) < 1e-3);
        }
    }
}
