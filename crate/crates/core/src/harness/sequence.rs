use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{Baseline, ExperimentConfig, OrderLabel};
use crate::backbone::{build_backbone, FrozenBackbone, PredictionHead};
use crate::error::{invalid, Result};
use crate::gating::{summarize_task, CentroidStore, GateMode};
use crate::metrics::{
    bank_kl, kl_matrix, kl_vs_srcc_correlation, srcc, BankGaussian, SequenceResults,
};
use crate::normbank::{BankRegistry, TaskNormBank};
use crate::predictor::Predictor;
use crate::seed::derive_seed;
use crate::synthdata::{
    batch_of, build_pairs, default_pair_count, make_task_dataset, mos_of, DistortionKind, PairSet,
    TaskDataset, TaskSpec,
};
use crate::trainer::{fit, pretrain_gating_bank, train_task, TrainReport};

/// Identifier of the gating corpus dataset.
pub const GATING_CORPUS_ID: &str = "gating-corpus";
/// Identifier of the single bank trained by the task-agnostic baseline.
pub const SHARED_BANK_ID: &str = "task-agnostic";

/// A trained model: frozen filters, banks and heads, and gating centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: FrozenBackbone,
    pub registry: BankRegistry,
    pub store: Option<CentroidStore>,
}

impl Model {
    pub fn predictor(&self) -> Predictor<'_> {
        Predictor::new(&self.backbone, &self.registry, self.store.as_ref())
    }
}

/// Metric summaries of one run; this is what checkpoints and reports store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub order: OrderLabel,
    pub task_ids: Vec<String>,
    pub baseline: Baseline,
    /// Headline results: soft gating, or the shared head for the baseline.
    pub soft: SequenceResults,
    pub hard: Option<SequenceResults>,
    pub oracle: Option<SequenceResults>,
}

/// Prediction vectors `[t][k]`: model after task `t` on test set `k ≤ t`.
pub type PredictionTable = Vec<Vec<Vec<f64>>>;

#[derive(Clone, Debug)]
pub struct SequenceRun {
    pub summary: RunSummary,
    pub soft_predictions: PredictionTable,
    pub hard_predictions: Option<PredictionTable>,
    pub oracle_predictions: Option<PredictionTable>,
    pub train_reports: Vec<TrainReport>,
    pub gating_report: Option<TrainReport>,
    pub datasets: Vec<TaskDataset>,
    pub model: Model,
}

/// Dataset and training pairs of one task; seeds are bound to the task id.
pub fn prepare_task(config: &ExperimentConfig, spec: &TaskSpec) -> Result<(TaskDataset, PairSet)> {
    let ds = make_task_dataset(
        spec,
        config.images_per_task,
        config.backbone.input_side,
        config.task_seed("data", &spec.id),
    )?;
    let pairs = build_pairs(
        &ds,
        default_pair_count(ds.train.len()),
        config.task_seed("pairs", &spec.id),
    )?;
    Ok((ds, pairs))
}

/// The all-distortion corpus used to train the gating bank.
pub fn prepare_gating_corpus(config: &ExperimentConfig) -> Result<(TaskDataset, PairSet)> {
    let spec = TaskSpec {
        id: GATING_CORPUS_ID.into(),
        kinds: DistortionKind::ALL.to_vec(),
        level_range: [0.0, 1.0],
    };
    let ds = make_task_dataset(
        &spec,
        config.gating_corpus_images,
        config.backbone.input_side,
        config.task_seed("data", GATING_CORPUS_ID),
    )?;
    let pairs = build_pairs(
        &ds,
        default_pair_count(ds.train.len()),
        config.task_seed("pairs", GATING_CORPUS_ID),
    )?;
    Ok((ds, pairs))
}

/// Builds the backbone and trains and installs the gating bank.
pub fn pretrain_gating(
    config: &ExperimentConfig,
) -> Result<(FrozenBackbone, BankRegistry, TrainReport)> {
    config.validate()?;
    let backbone = build_backbone(&config.backbone)?;
    let (corpus, pairs) = prepare_gating_corpus(config)?;
    let mut registry = BankRegistry::new();
    let report = pretrain_gating_bank(
        &backbone,
        &mut registry,
        &corpus,
        &pairs,
        &config
            .train
            .with_seed(config.task_seed("train", GATING_CORPUS_ID)),
    )?;
    Ok((backbone, registry, report))
}

fn to_f64(v: Vec<f32>) -> Vec<f64> {
    v.into_iter().map(f64::from).collect()
}

/// Fills the SRCC and cross-model matrices from a prediction table.
pub fn results_from_predictions(
    preds: &PredictionTable,
    datasets: &[TaskDataset],
) -> Result<SequenceResults> {
    let mut s = Vec::with_capacity(preds.len());
    let mut cross = Vec::with_capacity(preds.len());
    for (t, row) in preds.iter().enumerate() {
        let mut srow = Vec::with_capacity(t + 1);
        let mut crow = Vec::with_capacity(t);
        for (k, p) in row.iter().enumerate() {
            srow.push(srcc(p, &mos_of(&datasets[k].test))?);
            if k < t {
                crow.push(srcc(p, &preds[k][k])?);
            }
        }
        s.push(srow);
        cross.push(crow);
    }
    SequenceResults::from_matrices(s, cross)
}

/// Trains the configured sequence and evaluates after every task.
pub fn run_sequence(config: &ExperimentConfig) -> Result<SequenceRun> {
    config.validate()?;
    match config.baseline {
        Baseline::Tsn => run_tsn(config),
        Baseline::TaskAgnosticBn => run_shared(config),
    }
}

fn run_tsn(config: &ExperimentConfig) -> Result<SequenceRun> {
    let (backbone, mut registry, gating_report) = pretrain_gating(config)?;
    let mut store = CentroidStore::new(config.gating.clone());
    let tasks = config.ordered_tasks();
    let mut datasets: Vec<TaskDataset> = Vec::with_capacity(tasks.len());
    let mut reports = Vec::with_capacity(tasks.len());
    let (mut soft, mut hard, mut oracle) = (Vec::new(), Vec::new(), Vec::new());
    for spec in &tasks {
        let (ds, pairs) = prepare_task(config, spec)?;
        let train_cfg = config.train.with_seed(config.task_seed("train", &spec.id));
        reports.push(train_task(
            &backbone,
            &mut registry,
            &ds,
            &pairs,
            &train_cfg,
        )?);
        summarize_task(
            &backbone,
            &registry,
            &ds,
            &mut store,
            config.task_seed("kmeans", &spec.id),
        )?;
        datasets.push(ds);

        let predictor = Predictor::new(&backbone, &registry, Some(&store));
        let (mut srow, mut hrow, mut orow) = (Vec::new(), Vec::new(), Vec::new());
        for ds in &datasets {
            let batch = batch_of(&ds.test)?;
            srow.push(
                predictor
                    .gated(&batch, GateMode::Soft)?
                    .into_iter()
                    .map(|r| r.q_hat)
                    .collect(),
            );
            hrow.push(
                predictor
                    .gated(&batch, GateMode::Hard)?
                    .into_iter()
                    .map(|r| r.q_hat)
                    .collect(),
            );
            orow.push(to_f64(predictor.oracle(&batch, &ds.task_id)?));
        }
        soft.push(srow);
        hard.push(hrow);
        oracle.push(orow);
    }
    let summary = RunSummary {
        order: config.order,
        task_ids: tasks.iter().map(|t| t.id.clone()).collect(),
        baseline: Baseline::Tsn,
        soft: results_from_predictions(&soft, &datasets)?,
        hard: Some(results_from_predictions(&hard, &datasets)?),
        oracle: Some(results_from_predictions(&oracle, &datasets)?),
    };
    Ok(SequenceRun {
        summary,
        soft_predictions: soft,
        hard_predictions: Some(hard),
        oracle_predictions: Some(oracle),
        train_reports: reports,
        gating_report: Some(gating_report),
        datasets,
        model: Model {
            backbone,
            registry,
            store: Some(store),
        },
    })
}

fn run_shared(config: &ExperimentConfig) -> Result<SequenceRun> {
    let backbone = build_backbone(&config.backbone)?;
    let mut bank = TaskNormBank::init(&config.backbone, SHARED_BANK_ID);
    let mut head = PredictionHead::seeded(
        SHARED_BANK_ID,
        config.backbone.feature_dim(),
        derive_seed(config.seeds.training, "shared-head"),
    );
    let tasks = config.ordered_tasks();
    let mut datasets: Vec<TaskDataset> = Vec::with_capacity(tasks.len());
    let mut reports = Vec::with_capacity(tasks.len());
    let mut soft = Vec::new();
    for spec in &tasks {
        let (ds, pairs) = prepare_task(config, spec)?;
        let train_cfg = config.train.with_seed(config.task_seed("train", &spec.id));
        reports.push(fit(
            &backbone, &mut bank, &mut head, &ds, &pairs, &train_cfg,
        )?);
        datasets.push(ds);
        let row = datasets
            .iter()
            .map(|d| {
                Ok(to_f64(backbone.scores(
                    &bank,
                    &head,
                    &batch_of(&d.test)?,
                )?))
            })
            .collect::<Result<Vec<_>>>()?;
        soft.push(row);
    }
    bank.freeze()?;
    let mut registry = BankRegistry::new();
    registry.insert(bank, head)?;
    let summary = RunSummary {
        order: config.order,
        task_ids: tasks.iter().map(|t| t.id.clone()).collect(),
        baseline: Baseline::TaskAgnosticBn,
        soft: results_from_predictions(&soft, &datasets)?,
        hard: None,
        oracle: None,
    };
    Ok(SequenceRun {
        summary,
        soft_predictions: soft,
        hard_predictions: None,
        oracle_predictions: None,
        train_reports: reports,
        gating_report: None,
        datasets,
        model: Model {
            backbone,
            registry,
            store: None,
        },
    })
}

/// One row of the order-robustness table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub order: OrderLabel,
    pub task_ids: Vec<String>,
    pub msrcc: f64,
    pub mpi: f64,
    pub msi: f64,
    pub mpsi: f64,
    /// Oracle test-set predictions of the final model, keyed by task id.
    pub oracle_final: BTreeMap<String, Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderSuite {
    pub rows: Vec<OrderRow>,
}

impl OrderSuite {
    /// Largest minus smallest gated mSRCC across orders.
    pub fn msrcc_spread(&self) -> f64 {
        let (lo, hi) = self
            .rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r.msrcc), hi.max(r.msrcc))
            });
        hi - lo
    }

    /// True when every order produced byte-identical oracle predictions.
    pub fn oracle_identical(&self) -> bool {
        let bytes = |r: &OrderRow| -> Vec<(String, Vec<u32>)> {
            r.oracle_final
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| x.to_bits()).collect()))
                .collect()
        };
        self.rows.windows(2).all(|w| bytes(&w[0]) == bytes(&w[1]))
    }
}

/// Runs the per-task-bank sequence once per order with identical per-task seeds.
pub fn run_order_suite(base: &ExperimentConfig, orders: &[OrderLabel]) -> Result<OrderSuite> {
    if orders.len() < 2 {
        return Err(invalid("an order suite needs at least two orders"));
    }
    let mut rows = Vec::with_capacity(orders.len());
    for &order in orders {
        let cfg = ExperimentConfig {
            order,
            baseline: Baseline::Tsn,
            ..base.clone()
        };
        let run = run_sequence(&cfg)?;
        let predictor = run.model.predictor();
        let mut oracle_final = BTreeMap::new();
        for ds in &run.datasets {
            oracle_final.insert(
                ds.task_id.clone(),
                predictor.oracle(&batch_of(&ds.test)?, &ds.task_id)?,
            );
        }
        let s = &run.summary.soft;
        rows.push(OrderRow {
            order,
            task_ids: run.summary.task_ids.clone(),
            msrcc: s.msrcc,
            mpi: s.mpi,
            msi: s.msi,
            mpsi: s.mpsi,
            oracle_final,
        });
    }
    Ok(OrderSuite { rows })
}

/// `mPSI_t` after each task of the configured sequence.
pub fn run_length_curve(config: &ExperimentConfig) -> Result<Vec<f64>> {
    Ok(run_sequence(config)?.summary.soft.length_curve())
}

/// KL divergences between task banks next to cross-task SRCC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlAnalysis {
    pub task_ids: Vec<String>,
    /// `kl[i][j] = KL(bank_i ‖ bank_j)`.
    pub kl: Vec<Vec<f64>>,
    /// `cross_srcc[i][j]`: head `i` under bank `i`, scored on test set `j`.
    pub cross_srcc: Vec<Vec<f64>>,
    pub correlation: f64,
    pub within_family_kl: Option<f64>,
    pub cross_family_kl: Option<f64>,
}

/// Cross-task SRCC of every registered task on every dataset's test split.
pub fn cross_task_srcc(model: &Model, datasets: &[TaskDataset]) -> Result<Vec<Vec<f64>>> {
    let predictor = model.predictor();
    model
        .registry
        .task_ids()
        .iter()
        .map(|id| {
            datasets
                .iter()
                .map(|d| {
                    srcc(
                        &to_f64(predictor.oracle(&batch_of(&d.test)?, id)?),
                        &mos_of(&d.test),
                    )
                })
                .collect()
        })
        .collect()
}

/// Pairwise bank KL, cross-task SRCC and their rank correlation. `datasets`
/// must follow registry order.
pub fn analyze_kl(model: &Model, datasets: &[TaskDataset]) -> Result<KlAnalysis> {
    let ids = model.registry.task_ids();
    if datasets.len() != ids.len() || datasets.iter().zip(&ids).any(|(d, id)| &d.task_id != id) {
        return Err(invalid("datasets must follow registry order"));
    }
    let gaussians = model
        .registry
        .entries()
        .iter()
        .map(|e| BankGaussian::from_bank(&e.bank))
        .collect::<Result<Vec<_>>>()?;
    let kl = kl_matrix(&gaussians)?;
    let cross = cross_task_srcc(model, datasets)?;
    let correlation = kl_vs_srcc_correlation(&kl, &cross)?;
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for i in 0..ids.len() {
        for j in 0..ids.len() {
            if i != j {
                if datasets[i].spec.family() == datasets[j].spec.family() {
                    within.push(kl[i][j]);
                } else {
                    across.push(kl[i][j]);
                }
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(KlAnalysis {
        task_ids: ids,
        kl,
        cross_srcc: cross,
        correlation,
        within_family_kl: mean(&within),
        cross_family_kl: mean(&across),
    })
}

/// `KL(p ‖ p)` for every registered bank; all zero for well-formed banks.
pub fn self_kl(model: &Model) -> Result<Vec<f64>> {
    model
        .registry
        .entries()
        .iter()
        .map(|e| {
            let g = BankGaussian::from_bank(&e.bank)?;
            bank_kl(&g, &g)
        })
        .collect()
}
