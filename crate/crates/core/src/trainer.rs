//! Pairwise training with the Thurstone Case V model and the fidelity loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{FrozenBackbone, PredictionHead};
use crate::error::{invalid, Error, Result};
use crate::metrics::srcc;
use crate::normbank::{BankRegistry, TaskNormBank, GATING_BANK_ID};
use crate::numerics::{normal_cdf, normal_pdf, AdamState, Tensor, BN_MOMENTUM};
use crate::seed::{derive_seed, rng_from};
use crate::synthdata::{batch_of, mos_of, DistortionKind, PairSet, TaskDataset};

/// Clamp applied to `p̂` before differentiating the fidelity loss.
pub const P_HAT_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub lr_decay_factor: f32,
    /// 1-based epoch from which the decayed rate applies.
    pub lr_decay_epoch: usize,
    pub max_epochs: usize,
    /// Pairs per optimization step.
    pub batch_size: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub bn_momentum: f32,
    /// Seeds head initialization and pair shuffling. Not serialized: sequence
    /// runs derive it from the experiment seeds and the task id.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay_factor: 10.0,
            lr_decay_epoch: 8,
            max_epochs: 12,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: BN_MOMENTUM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(invalid(
                "learning rate, batch size and epochs must be positive",
            ));
        }
        if self.lr_decay_epoch > self.max_epochs || !(self.lr_decay_factor > 0.0) {
            return Err(invalid("decay epoch must not exceed max epochs"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(invalid("normalization momentum must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        if epoch + 1 >= self.lr_decay_epoch {
            self.lr / self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task_id: String,
    pub epoch_losses: Vec<f64>,
    pub batch_losses: Vec<f64>,
    pub val_srcc: Option<f64>,
    pub steps: usize,
    /// Wall-clock time; excluded from serialized output so reruns compare equal.
    #[serde(skip)]
    pub seconds: f64,
}

/// `p̂ = Φ((s_x − s_y)/√2)`: probability that x is rated above y.
pub fn thurstone_prob(score_x: f64, score_y: f64) -> f64 {
    normal_cdf((score_x - score_y) / std::f64::consts::SQRT_2)
}

/// `1 − sqrt(r·p̂) − sqrt((1−r)(1−p̂))`.
pub fn fidelity_loss(label: u8, p_hat: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_hat) {
        return Err(invalid(format!("probability {p_hat} outside [0, 1]")));
    }
    let r = label as f64;
    Ok(1.0 - (r * p_hat).sqrt() - ((1.0 - r) * (1.0 - p_hat)).sqrt())
}

/// `dℓ/dp̂`, with `p̂` clamped to `[1e-6, 1 − 1e-6]`. Only the branch selected
/// by the label contributes.
pub fn fidelity_loss_grad(label: u8, p_hat: f64) -> f64 {
    let p = p_hat.clamp(P_HAT_CLAMP, 1.0 - P_HAT_CLAMP);
    if label == 1 {
        -1.0 / (2.0 * p.sqrt())
    } else {
        1.0 / (2.0 * (1.0 - p).sqrt())
    }
}

struct Optimizers {
    gamma: Vec<AdamState>,
    beta: Vec<AdamState>,
    head_weight: AdamState,
    head_bias: AdamState,
}

impl Optimizers {
    fn new(bank: &TaskNormBank, head: &PredictionHead, cfg: &TrainConfig) -> Self {
        let adam = |n| AdamState::new(n, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Self {
            gamma: bank.sites().iter().map(|s| adam(s.channels())).collect(),
            beta: bank.sites().iter().map(|s| adam(s.channels())).collect(),
            head_weight: adam(head.weight.len()),
            head_bias: adam(1),
        }
    }

    fn set_lr(&mut self, lr: f32) {
        for s in self.gamma.iter_mut().chain(self.beta.iter_mut()) {
            s.lr = lr;
        }
        self.head_weight.lr = lr;
        self.head_bias.lr = lr;
    }
}

/// Optimizes `bank` γ/β and `head` on `pairs`. Running statistics follow the
/// forward passes. This is the shared loop behind [`train_task`],
/// [`pretrain_gating_bank`] and continued fine-tuning of a shared bank.
pub fn fit(
    backbone: &FrozenBackbone,
    bank: &mut TaskNormBank,
    head: &mut PredictionHead,
    dataset: &TaskDataset,
    pairs: &PairSet,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if pairs.task_id != dataset.task_id {
        return Err(invalid("pairs were built for a different task"));
    }
    if pairs.is_empty() {
        return Err(invalid("no training pairs"));
    }
    let m = dataset.train.len();
    if pairs.pairs.iter().any(|p| p.x >= m || p.y >= m) {
        return Err(invalid("pair index outside the training split"));
    }
    bank.sites_mut()?;

    let started = Instant::now();
    let mut rng = rng_from(derive_seed(config.seed, "pair-shuffle"));
    let mut opt = Optimizers::new(bank, head, config);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.max_epochs);
    let mut batch_losses = Vec::new();
    let mut steps = 0;

    for epoch in 0..config.max_epochs {
        opt.set_lr(config.lr_at(epoch));
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len();
            let mut images: Vec<&Tensor> = Vec::with_capacity(2 * b);
            images.extend(
                chunk
                    .iter()
                    .map(|&i| &dataset.train[pairs.pairs[i].x].image),
            );
            images.extend(
                chunk
                    .iter()
                    .map(|&i| &dataset.train[pairs.pairs[i].y].image),
            );
            let batch = Tensor::stack(&images)?;
            let (scores, cache) = backbone.scores_train(bank, head, &batch, config.bn_momentum)?;

            let mut grad = vec![0.0f32; 2 * b];
            let mut loss = 0.0;
            for (j, &i) in chunk.iter().enumerate() {
                let label = pairs.pairs[i].label;
                let z = (scores[j] as f64 - scores[b + j] as f64) / std::f64::consts::SQRT_2;
                let p = normal_cdf(z);
                loss += fidelity_loss(label, p)?;
                let dp = fidelity_loss_grad(label, p) * normal_pdf(z) / std::f64::consts::SQRT_2;
                grad[j] = (dp / b as f64) as f32;
                grad[b + j] = (-dp / b as f64) as f32;
            }
            let mean_loss = loss / b as f64;
            batch_losses.push(mean_loss);
            epoch_sum += loss;

            let g = backbone.backward_to_params(&grad, &cache, head)?;
            let sites = bank.sites_mut()?;
            for (s, site) in sites.iter_mut().enumerate() {
                opt.gamma[s].step(&mut site.gamma, &g.gamma[s])?;
                opt.beta[s].step(&mut site.beta, &g.beta[s])?;
            }
            opt.head_weight.step(&mut head.weight, &g.head_weight)?;
            let mut bias = [head.bias];
            opt.head_bias.step(&mut bias, &[g.head_bias])?;
            head.bias = bias[0];
            steps += 1;
        }
        epoch_losses.push(epoch_sum / pairs.len() as f64);
    }

    let val_srcc = if dataset.val.len() >= 2 {
        let scores = backbone.scores(bank, head, &batch_of(&dataset.val)?)?;
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        srcc(&s, &mos_of(&dataset.val)).ok()
    } else {
        None
    };
    if !head.is_finite() {
        return Err(Error::State("training diverged".into()));
    }
    Ok(TrainReport {
        task_id: dataset.task_id.clone(),
        epoch_losses,
        batch_losses,
        val_srcc,
        steps,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Learns a fresh identity-initialized bank and a seeded head for one task,
/// freezes the bank and registers both. Existing entries are not touched.
pub fn train_task(
    backbone: &FrozenBackbone,
    registry: &mut BankRegistry,
    dataset: &TaskDataset,
    pairs: &PairSet,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if registry.contains(&dataset.task_id) {
        return Err(Error::State(format!(
            "task `{}` is already registered",
            dataset.task_id
        )));
    }
    let cfg = backbone.config();
    let mut bank = TaskNormBank::init(cfg, dataset.task_id.clone());
    let mut head = PredictionHead::seeded(
        dataset.task_id.clone(),
        cfg.feature_dim(),
        derive_seed(config.seed, "head-init"),
    );
    let report = fit(backbone, &mut bank, &mut head, dataset, pairs, config)?;
    bank.freeze()?;
    registry.insert(bank, head)?;
    Ok(report)
}

/// Trains the distortion-aware bank on a corpus that covers every distortion
/// kind, discards the throwaway head, and installs the frozen bank.
pub fn pretrain_gating_bank(
    backbone: &FrozenBackbone,
    registry: &mut BankRegistry,
    corpus: &TaskDataset,
    pairs: &PairSet,
    config: &TrainConfig,
) -> Result<TrainReport> {
    for kind in DistortionKind::ALL {
        if !corpus.train.iter().any(|s| s.kind == kind) {
            return Err(invalid(format!(
                "gating corpus has no `{kind}` training images"
            )));
        }
    }
    if registry.gating_bank().is_some() {
        return Err(Error::State("a gating bank is already installed".into()));
    }
    let cfg = backbone.config();
    let mut bank = TaskNormBank::init(cfg, GATING_BANK_ID);
    let mut head = PredictionHead::seeded(
        GATING_BANK_ID,
        cfg.feature_dim(),
        derive_seed(config.seed, "head-init"),
    );
    let report = fit(backbone, &mut bank, &mut head, corpus, pairs, config)?;
    bank.freeze()?;
    registry.install_gating_bank(bank)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thurstone_examples() {
        assert_eq!(thurstone_prob(1.3, 1.3), 0.5);
        let p = thurstone_prob(std::f64::consts::SQRT_2, 0.0);
        assert!((p - 0.841344746068543).abs() < 1e-7);
        let (a, b) = (0.37, -1.1);
        assert!((thurstone_prob(a, b) - (1.0 - thurstone_prob(b, a))).abs() < 1e-12);
    }

    #[test]
    fn fidelity_examples() {
        assert_eq!(fidelity_loss(1, 1.0).unwrap(), 0.0);
        assert_eq!(fidelity_loss(1, 0.0).unwrap(), 1.0);
        assert!((fidelity_loss(1, 0.5).unwrap() - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        assert!(fidelity_loss(0, 1.2).is_err());
        assert!(fidelity_loss(1, -0.1).is_err());
    }

    #[test]
    fn fidelity_grad_examples() {
        assert!((fidelity_loss_grad(1, 0.25) + 1.0).abs() < 1e-12);
        assert!((fidelity_loss_grad(0, 0.75) - 1.0).abs() < 1e-12);
        assert!(fidelity_loss_grad(1, 0.0).is_finite());
        assert!(fidelity_loss_grad(0, 1.0).is_finite());
    }

    #[test]
    fn fidelity_grad_matches_finite_differences() {
        let h = 1e-6;
        for label in [0u8, 1] {
            for i in 0..=90 {
                let p = 0.05 + 0.01 * i as f64;
                let fd = (fidelity_loss(label, p + h).unwrap()
                    - fidelity_loss(label, p - h).unwrap())
                    / (2.0 * h);
                let g = fidelity_loss_grad(label, p);
                assert!(
                    (g - fd).abs() <= 1e-4 * fd.abs().max(1e-12),
                    "r={label} p={p}"
                );
            }
        }
    }

    #[test]
    fn lr_schedule_decays_at_eighth_epoch() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(6), 1e-3);
        assert!((c.lr_at(7) - 1e-4).abs() < 1e-10);
        assert!((c.lr_at(11) - 1e-4).abs() < 1e-10);
        assert!(TrainConfig {
            lr_decay_epoch: 13,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
    }
}
