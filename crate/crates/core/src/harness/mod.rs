//! Experiment orchestration: sequence runs, order and length robustness,
//! the task-agnostic baseline, checkpoints and file exports.

pub mod checkpoint;
pub mod config;
pub mod export;
pub mod sequence;
pub mod tensor_io;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{default_tasks, Baseline, ExperimentConfig, OrderLabel, Seeds};
pub use sequence::{
    analyze_kl, cross_task_srcc, prepare_gating_corpus, prepare_task, pretrain_gating,
    run_length_curve, run_order_suite, run_sequence, self_kl, KlAnalysis, Model, OrderRow,
    OrderSuite, RunSummary, SequenceRun, GATING_CORPUS_ID, SHARED_BANK_ID,
};
