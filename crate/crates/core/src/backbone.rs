//! Frozen multi-stage feature extractor.
//!
//! Each stage is conv → normalization → ReLU → 2×2 max-pool. Filters are drawn
//! once from a seeded He-style Gaussian and never change. Every stage exposes
//! a globally pooled feature; the prediction head reads the last one.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::normbank::TaskNormBank;
use crate::numerics::{
    batchnorm_backward, batchnorm_eval, batchnorm_forward, conv2d_backward_input, conv2d_forward,
    global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward,
    maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward, BnCache, BnMode,
    ConvCache, GapCache, LinearCache, PoolCache, ReluCache, Tensor, BN_EPS,
};
use crate::seed::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels per stage; the stage count is the length.
    pub stage_channels: Vec<usize>,
    pub kernel_size: usize,
    pub input_channels: usize,
    pub input_side: usize,
    pub filter_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![8, 16, 32, 64],
            kernel_size: 3,
            input_channels: 1,
            input_side: 32,
            filter_seed: 2024,
        }
    }
}

impl BackboneConfig {
    pub fn stage_count(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stage_count();
        if s < 2 {
            return Err(invalid("backbone needs at least two stages"));
        }
        if self.stage_channels.contains(&0) || self.input_channels == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        if self.kernel_size == 0 {
            return Err(invalid("kernel size must be positive"));
        }
        if self.input_side == 0 || !self.input_side.is_multiple_of(1 << s) {
            return Err(invalid(format!(
                "input side {} must be a positive multiple of 2^{s}",
                self.input_side
            )));
        }
        if self.kernel_size > self.input_side >> (s - 1) {
            return Err(invalid("kernel exceeds the last stage's spatial size"));
        }
        Ok(())
    }

    /// Number of filter weights in stage `s` (0-based).
    pub fn filter_len(&self, s: usize) -> usize {
        let cin = if s == 0 {
            self.input_channels
        } else {
            self.stage_channels[s - 1]
        };
        self.stage_channels[s] * cin * self.kernel_size * self.kernel_size
    }
}

/// Linear head on the last pooled feature: `score = w·f + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionHead {
    pub task_id: String,
    pub weight: Vec<f32>,
    pub bias: f32,
}

impl PredictionHead {
    pub fn zeros(task_id: impl Into<String>, dim: usize) -> Self {
        Self {
            task_id: task_id.into(),
            weight: vec![0.0; dim],
            bias: 0.0,
        }
    }

    /// Gaussian weights with std `1/sqrt(dim)`, zero bias.
    pub fn seeded(task_id: impl Into<String>, dim: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let normal = Normal::new(0.0f32, 1.0 / (dim as f32).sqrt()).expect("valid std");
        let weight = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        Self {
            task_id: task_id.into(),
            weight,
            bias: 0.0,
        }
    }

    fn weight_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.weight.len()], self.weight.clone()).expect("non-empty head")
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weight.iter().all(|v| v.is_finite())
    }
}

/// Post-pool activation maps and their global averages, one per stage.
#[derive(Clone, Debug)]
pub struct Features {
    pub stage_maps: Vec<Tensor>,
    /// `[N, C_s]` per stage.
    pub pooled: Vec<Tensor>,
}

#[derive(Clone, Debug)]
struct StageCache {
    conv: ConvCache,
    bn: BnCache,
    relu: ReluCache,
    pool: PoolCache,
}

/// Everything a train-mode forward saved for [`FrozenBackbone::backward_to_params`].
#[derive(Clone, Debug)]
pub struct QualityCache {
    stages: Vec<StageCache>,
    gap: GapCache,
    head_input: LinearCache,
    batch: usize,
}

/// Gradients for every trainable parameter of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub gamma: Vec<Vec<f32>>,
    pub beta: Vec<Vec<f32>>,
    pub head_weight: Vec<f32>,
    pub head_bias: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    filters: Vec<Tensor>,
}

/// Draws the frozen filters for `config`.
pub fn build_backbone(config: &BackboneConfig) -> Result<FrozenBackbone> {
    config.validate()?;
    let mut rng = rng_from(config.filter_seed);
    let k = config.kernel_size;
    let mut filters = Vec::with_capacity(config.stage_count());
    let mut cin = config.input_channels;
    for &cout in &config.stage_channels {
        let std = (2.0 / (cin * k * k) as f64).sqrt() as f32;
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..cout * cin * k * k)
            .map(|_| normal.sample(&mut rng))
            .collect();
        filters.push(Tensor::new(vec![cout, cin, k, k], data)?);
        cin = cout;
    }
    Ok(FrozenBackbone {
        config: config.clone(),
        filters,
    })
}

impl FrozenBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn filters(&self) -> &[Tensor] {
        &self.filters
    }

    fn check(&self, bank: &TaskNormBank, batch: &Tensor) -> Result<()> {
        if !bank.matches_config(&self.config) {
            return Err(invalid(format!(
                "bank `{}` layout {:?} does not match backbone {:?}",
                bank.task_id(),
                bank.site_channels(),
                self.config.stage_channels
            )));
        }
        let (_, c, h, w) = batch.dims4()?;
        let s = self.config.stage_count();
        let unit = 1 << s;
        if c != self.config.input_channels {
            return Err(invalid(format!(
                "batch has {c} channels, backbone expects {}",
                self.config.input_channels
            )));
        }
        if h % unit != 0
            || w % unit != 0
            || (h >> (s - 1)) < self.config.kernel_size
            || (w >> (s - 1)) < self.config.kernel_size
        {
            return Err(invalid(format!(
                "batch spatial size {h}x{w} is incompatible with {s} stages"
            )));
        }
        Ok(())
    }

    /// Eval-mode features under `bank`. Pure.
    pub fn features(&self, bank: &TaskNormBank, batch: &Tensor) -> Result<Features> {
        self.check(bank, batch)?;
        let mut x = batch.clone();
        let mut stage_maps = Vec::with_capacity(self.filters.len());
        let mut pooled = Vec::with_capacity(self.filters.len());
        for (filters, site) in self.filters.iter().zip(bank.sites()) {
            let (z, _) = conv2d_forward(&x, filters, 1)?;
            let z = batchnorm_eval(&z, site, BN_EPS)?;
            let (a, _) = relu_forward(&z);
            let (p, _) = maxpool2x2_forward(&a)?;
            let (g, _) = global_avg_pool_forward(&p)?;
            pooled.push(g);
            stage_maps.push(p.clone());
            x = p;
        }
        Ok(Features { stage_maps, pooled })
    }

    fn features_train_inner(
        &self,
        bank: &mut TaskNormBank,
        batch: &Tensor,
        momentum: f32,
    ) -> Result<(Features, Vec<StageCache>)> {
        self.check(bank, batch)?;
        let sites = bank.sites_mut()?;
        let mut x = batch.clone();
        let mut stage_maps = Vec::with_capacity(self.filters.len());
        let mut pooled = Vec::with_capacity(self.filters.len());
        let mut caches = Vec::with_capacity(self.filters.len());
        for (filters, site) in self.filters.iter().zip(sites.iter_mut()) {
            let (z, conv) = conv2d_forward(&x, filters, 1)?;
            let (z, bn) = batchnorm_forward(&z, site, BnMode::Train { momentum }, BN_EPS)?;
            let (a, relu) = relu_forward(&z);
            let (p, pool) = maxpool2x2_forward(&a)?;
            let (g, _) = global_avg_pool_forward(&p)?;
            pooled.push(g);
            stage_maps.push(p.clone());
            caches.push(StageCache {
                conv,
                bn,
                relu,
                pool,
            });
            x = p;
        }
        Ok((Features { stage_maps, pooled }, caches))
    }

    /// Train-mode features: batch statistics, running averages updated.
    pub fn features_train(
        &self,
        bank: &mut TaskNormBank,
        batch: &Tensor,
        momentum: f32,
    ) -> Result<Features> {
        Ok(self.features_train_inner(bank, batch, momentum)?.0)
    }

    fn head_scores(&self, head: &PredictionHead, last: &Tensor) -> Result<(Vec<f32>, LinearCache)> {
        if head.weight.len() != self.config.feature_dim() {
            return Err(invalid("head width does not match the last stage"));
        }
        let (y, cache) = linear_forward(last, &head.weight_tensor(), &[head.bias])?;
        Ok((y.into_data(), cache))
    }

    /// Eval-mode quality scores, one per image.
    pub fn scores(
        &self,
        bank: &TaskNormBank,
        head: &PredictionHead,
        batch: &Tensor,
    ) -> Result<Vec<f32>> {
        let feats = self.features(bank, batch)?;
        let last = feats.pooled.last().expect("at least two stages");
        Ok(self.head_scores(head, last)?.0)
    }

    /// Train-mode quality scores together with the cache for backward.
    pub fn scores_train(
        &self,
        bank: &mut TaskNormBank,
        head: &PredictionHead,
        batch: &Tensor,
        momentum: f32,
    ) -> Result<(Vec<f32>, QualityCache)> {
        let (feats, stages) = self.features_train_inner(bank, batch, momentum)?;
        let last_map = feats.stage_maps.last().expect("at least two stages");
        let (last, gap) = global_avg_pool_forward(last_map)?;
        let (scores, head_input) = self.head_scores(head, &last)?;
        let batch_len = scores.len();
        Ok((
            scores,
            QualityCache {
                stages,
                gap,
                head_input,
                batch: batch_len,
            },
        ))
    }

    /// Chains the backward kernels through the frozen stack. Only γ, β and
    /// the head receive gradients.
    pub fn backward_to_params(
        &self,
        grad_scores: &[f32],
        cache: &QualityCache,
        head: &PredictionHead,
    ) -> Result<ParamGrads> {
        if grad_scores.len() != cache.batch || cache.stages.len() != self.filters.len() {
            return Err(invalid("gradient does not match the forward cache"));
        }
        let g = Tensor::new(vec![cache.batch, 1], grad_scores.to_vec())?;
        let lin = linear_backward(&g, &head.weight_tensor(), &cache.head_input)?;
        let mut grad = global_avg_pool_backward(&lin.input, &cache.gap)?;
        let s = self.filters.len();
        let mut gamma = vec![Vec::new(); s];
        let mut beta = vec![Vec::new(); s];
        for i in (0..s).rev() {
            let sc = &cache.stages[i];
            let ga = maxpool2x2_backward(&grad, &sc.pool)?;
            let gz = relu_backward(&ga, &sc.relu)?;
            let bn = batchnorm_backward(&gz, &sc.bn)?;
            gamma[i] = bn.gamma;
            beta[i] = bn.beta;
            if i > 0 {
                grad = conv2d_backward_input(&bn.input, &self.filters[i], &sc.conv)?;
            }
        }
        Ok(ParamGrads {
            gamma,
            beta,
            head_weight: lin.weight.into_data(),
            head_bias: lin.bias[0],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::normbank::freeze_bank;
    use crate::numerics::BN_MOMENTUM;
    use rand::Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            stage_channels: vec![3, 4],
            kernel_size: 3,
            input_channels: 1,
            input_side: 8,
            filter_seed: 11,
        }
    }

    fn batch(n: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        let data = (0..n * side * side)
            .map(|_| rng.random_range(0.0f32..1.0))
            .collect();
        Tensor::new(vec![n, 1, side, side], data).unwrap()
    }

    #[test]
    fn construction_is_seeded() {
        let cfg = BackboneConfig::default();
        let a = build_backbone(&cfg).unwrap();
        let b = build_backbone(&cfg).unwrap();
        assert_eq!(a, b);
        let c = build_backbone(&BackboneConfig {
            filter_seed: 1,
            ..cfg.clone()
        })
        .unwrap();
        assert_ne!(a.filters()[0], c.filters()[0]);
        assert_eq!(a.filters()[0].len(), 72);
        assert_eq!(cfg.filter_len(0), 72);
    }

    #[test]
    fn rejects_invalid_configs() {
        let base = BackboneConfig::default();
        for bad in [
            BackboneConfig {
                stage_channels: vec![8],
                ..base.clone()
            },
            BackboneConfig {
                stage_channels: vec![8, 0, 4, 4],
                ..base.clone()
            },
            BackboneConfig {
                input_side: 24,
                ..base.clone()
            },
            BackboneConfig {
                kernel_size: 5,
                ..base.clone()
            },
        ] {
            assert!(build_backbone(&bad).is_err());
        }
    }

    #[test]
    fn zero_batch_under_identity_bank_gives_zero_features() {
        let cfg = BackboneConfig::default();
        let bb = build_backbone(&cfg).unwrap();
        let bank = TaskNormBank::init(&cfg, "t");
        let feats = bb.features(&bank, &Tensor::zeros(&[2, 1, 32, 32])).unwrap();
        for (s, p) in feats.pooled.iter().enumerate() {
            assert_eq!(p.shape(), &[2, cfg.stage_channels[s]]);
            // With ε > 0 the identity bank scales by 1/sqrt(1+ε); zero stays zero.
            assert!(p.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pooled_feature_is_channel_mean_of_stage_map() {
        let cfg = small();
        let bb = build_backbone(&cfg).unwrap();
        let bank = TaskNormBank::init(&cfg, "t");
        let feats = bb.features(&bank, &batch(3, 8, 1)).unwrap();
        for (map, pooled) in feats.stage_maps.iter().zip(&feats.pooled) {
            let (n, c, h, w) = map.dims4().unwrap();
            for b in 0..n {
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for y in 0..h {
                        for x in 0..w {
                            acc += map.data()[((b * c + ch) * h + y) * w + x] as f64;
                        }
                    }
                    let mean = acc / (h * w) as f64;
                    assert!((pooled.data()[b * c + ch] as f64 - mean).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn eval_is_pure_and_batch_invariant() {
        let cfg = BackboneConfig::default();
        let bb = build_backbone(&cfg).unwrap();
        let mut bank = TaskNormBank::init(&cfg, "t");
        bb.features_train(&mut bank, &batch(4, 32, 2), BN_MOMENTUM)
            .unwrap();
        let bank = freeze_bank(bank).unwrap();
        let before = bank.to_bytes();
        let head = PredictionHead::seeded("t", 64, 3);
        let imgs = batch(5, 32, 4);
        let all = bb.scores(&bank, &head, &imgs).unwrap();
        assert_eq!(all, bb.scores(&bank, &head, &imgs).unwrap());
        for i in 0..5 {
            let single = Tensor::new(
                vec![1, 1, 32, 32],
                imgs.data()[i * 1024..(i + 1) * 1024].to_vec(),
            )
            .unwrap();
            let s = bb.scores(&bank, &head, &single).unwrap();
            assert_eq!(s[0].to_bits(), all[i].to_bits());
        }
        assert_eq!(bank.to_bytes(), before);
    }

    #[test]
    fn pooled_width_independent_of_input_size() {
        let cfg = BackboneConfig::default();
        let bb = build_backbone(&cfg).unwrap();
        let bank = TaskNormBank::init(&cfg, "t");
        let feats = bb.features(&bank, &batch(1, 64, 5)).unwrap();
        assert_eq!(feats.pooled.last().unwrap().shape(), &[1, 64]);
    }

    #[test]
    fn head_linearity_and_bias() {
        let cfg = small();
        let bb = build_backbone(&cfg).unwrap();
        let bank = TaskNormBank::init(&cfg, "t");
        let imgs = batch(3, 8, 6);
        let mut head = PredictionHead::zeros("t", 4);
        head.bias = 1.25;
        assert!(bb
            .scores(&bank, &head, &imgs)
            .unwrap()
            .iter()
            .all(|&s| s == 1.25));

        let head = PredictionHead {
            bias: 0.5,
            ..PredictionHead::seeded("t", 4, 9)
        };
        let doubled = PredictionHead {
            weight: head.weight.iter().map(|w| 2.0 * w).collect(),
            bias: 2.0 * head.bias,
            ..head.clone()
        };
        let s1 = bb.scores(&bank, &head, &imgs).unwrap();
        let s2 = bb.scores(&bank, &doubled, &imgs).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((2.0 * a - b).abs() < 1e-6);
        }
        let feats = bb.features(&bank, &imgs).unwrap();
        let last = feats.pooled.last().unwrap();
        for (i, s) in s1.iter().enumerate() {
            let dot: f64 = last
                .row(i)
                .iter()
                .zip(&head.weight)
                .map(|(f, w)| (*f as f64) * (*w as f64))
                .sum::<f64>()
                + 0.5;
            assert!((*s as f64 - dot).abs() < 1e-6);
        }
    }

    #[test]
    fn bank_mismatch_and_frozen_train_are_errors() {
        let cfg = small();
        let bb = build_backbone(&cfg).unwrap();
        let other = TaskNormBank::init(&BackboneConfig::default(), "t");
        assert!(bb.features(&other, &batch(1, 8, 1)).is_err());
        let mut frozen = freeze_bank(TaskNormBank::init(&cfg, "t")).unwrap();
        assert!(matches!(
            bb.features_train(&mut frozen, &batch(2, 8, 1), BN_MOMENTUM),
            Err(Error::State(_))
        ));
        let bank = TaskNormBank::init(&cfg, "t");
        assert!(bb.features(&bank, &batch(1, 10, 1)).is_err());
    }

    #[test]
    fn backward_zero_grad_and_bias_sum() {
        let cfg = small();
        let bb = build_backbone(&cfg).unwrap();
        let mut bank = TaskNormBank::init(&cfg, "t");
        let head = PredictionHead::seeded("t", 4, 1);
        let (_, cache) = bb
            .scores_train(&mut bank, &head, &batch(4, 8, 2), BN_MOMENTUM)
            .unwrap();
        let zero = bb.backward_to_params(&[0.0; 4], &cache, &head).unwrap();
        assert!(zero
            .gamma
            .iter()
            .chain(&zero.beta)
            .flatten()
            .all(|&v| v == 0.0));
        assert!(zero.head_weight.iter().all(|&v| v == 0.0));
        assert_eq!(zero.head_bias, 0.0);
        let g = [0.5, -1.0, 0.25, 2.0];
        let grads = bb.backward_to_params(&g, &cache, &head).unwrap();
        assert!((grads.head_bias - 1.75).abs() < 1e-6);
        assert!(bb.backward_to_params(&[0.0; 3], &cache, &head).is_err());
    }
}
