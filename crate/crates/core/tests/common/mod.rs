#![allow(dead_code)]

use taskbn::backbone::BackboneConfig;
use taskbn::gating::GatingConfig;
use taskbn::harness::ExperimentConfig;
use taskbn::synthdata::{DistortionKind, TaskSpec};
use taskbn::trainer::TrainConfig;

/// Two-stage 16×16 backbone and short training: seconds per sequence.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stage_channels: vec![4, 8],
        kernel_size: 3,
        input_channels: 1,
        input_side: 16,
        filter_seed: 5,
    }
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        lr_decay_epoch: 3,
        lr: 5e-3,
        ..TrainConfig::default()
    }
}

pub fn tiny_config(kinds: &[DistortionKind]) -> ExperimentConfig {
    ExperimentConfig {
        tasks: kinds.iter().copied().map(TaskSpec::single).collect(),
        images_per_task: 30,
        gating_corpus_images: 36,
        backbone: tiny_backbone(),
        train: tiny_train(),
        gating: GatingConfig {
            k: 4,
            tau: 32.0,
            stages: vec![1, 2],
        },
        ..ExperimentConfig::default()
    }
}
