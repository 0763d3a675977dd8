//! Inference: per-head scores, task-oracle selection and gated summation.

use std::cell::Cell;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::FrozenBackbone;
use crate::error::{invalid, Error, Result};
use crate::gating::{gate_batch, CentroidStore, GateMode};
use crate::normbank::BankRegistry;
use crate::numerics::Tensor;

/// How a record's final score was produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeTag {
    Oracle(String),
    Soft,
    Hard,
}

impl fmt::Display for ModeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Oracle(t) => write!(f, "oracle:{t}"),
            Self::Soft => f.write_str("soft"),
            Self::Hard => f.write_str("hard"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_index: usize,
    /// Per-head scores in registry order; `None` for heads that were skipped.
    pub scores: Vec<Option<f32>>,
    pub weights: Vec<f64>,
    pub q_hat: f64,
    pub mode: ModeTag,
}

/// Counts of backbone passes, per image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCounts {
    pub quality: u64,
    pub gating: u64,
}

/// Read-only view over a trained model that counts every backbone pass it
/// performs.
#[derive(Debug)]
pub struct Predictor<'a> {
    backbone: &'a FrozenBackbone,
    registry: &'a BankRegistry,
    store: Option<&'a CentroidStore>,
    quality: Cell<u64>,
    gating: Cell<u64>,
}

impl<'a> Predictor<'a> {
    pub fn new(
        backbone: &'a FrozenBackbone,
        registry: &'a BankRegistry,
        store: Option<&'a CentroidStore>,
    ) -> Self {
        Self {
            backbone,
            registry,
            store,
            quality: Cell::new(0),
            gating: Cell::new(0),
        }
    }

    pub fn counts(&self) -> PassCounts {
        PassCounts {
            quality: self.quality.get(),
            gating: self.gating.get(),
        }
    }

    pub fn reset_counts(&self) {
        self.quality.set(0);
        self.gating.set(0);
    }

    fn head_scores(&self, t: usize, batch: &Tensor) -> Result<Vec<f32>> {
        let e = &self.registry.entries()[t];
        let s = self.backbone.scores(&e.bank, &e.head, batch)?;
        self.quality.set(self.quality.get() + s.len() as u64);
        Ok(s)
    }

    /// Score of every image under the bank and head of `task_id`.
    pub fn oracle(&self, batch: &Tensor, task_id: &str) -> Result<Vec<f32>> {
        let t = self
            .registry
            .position(task_id)
            .ok_or_else(|| invalid(format!("task `{task_id}` is not registered")))?;
        self.head_scores(t, batch)
    }

    /// `[image][task]` scores from every registered head.
    pub fn all_heads(&self, batch: &Tensor) -> Result<Vec<Vec<f32>>> {
        if self.registry.is_empty() {
            return Err(Error::State("registry holds no tasks".into()));
        }
        let n = batch.shape().first().copied().unwrap_or(0);
        let mut out = vec![Vec::with_capacity(self.registry.len()); n];
        for t in 0..self.registry.len() {
            for (row, s) in out.iter_mut().zip(self.head_scores(t, batch)?) {
                row.push(s);
            }
        }
        Ok(out)
    }

    /// Oracle records for every image of `batch`.
    pub fn oracle_records(&self, batch: &Tensor, task_id: &str) -> Result<Vec<PredictionRecord>> {
        let t = self
            .registry
            .position(task_id)
            .ok_or_else(|| invalid(format!("task `{task_id}` is not registered")))?;
        let scores = self.head_scores(t, batch)?;
        let tasks = self.registry.len();
        Ok(scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut slots = vec![None; tasks];
                slots[t] = Some(s);
                let mut weights = vec![0.0; tasks];
                weights[t] = 1.0;
                PredictionRecord {
                    image_index: i,
                    scores: slots,
                    weights,
                    q_hat: s as f64,
                    mode: ModeTag::Oracle(task_id.to_string()),
                }
            })
            .collect())
    }

    /// Gated predictions. Soft mode evaluates every head; hard mode evaluates
    /// only the selected head of each image.
    pub fn gated(&self, batch: &Tensor, mode: GateMode) -> Result<Vec<PredictionRecord>> {
        let store = self
            .store
            .ok_or_else(|| Error::State("no centroid store attached".into()))?;
        let gates = gate_batch(self.backbone, self.registry, store, batch, mode)?;
        self.gating.set(self.gating.get() + gates.len() as u64);
        let tasks = self.registry.len();
        match mode {
            GateMode::Soft => {
                let scores = self.all_heads(batch)?;
                Ok(gates
                    .into_iter()
                    .zip(scores)
                    .enumerate()
                    .map(|(i, (g, s))| {
                        let q_hat = g.weights.iter().zip(&s).map(|(&a, &v)| a * v as f64).sum();
                        PredictionRecord {
                            image_index: i,
                            scores: s.into_iter().map(Some).collect(),
                            weights: g.weights,
                            q_hat,
                            mode: ModeTag::Soft,
                        }
                    })
                    .collect())
            }
            GateMode::Hard => {
                let selected: Vec<usize> = gates
                    .iter()
                    .map(|g| g.selected.expect("hard gate selects"))
                    .collect();
                let mut slot_scores = vec![None; gates.len()];
                for t in 0..tasks {
                    let members: Vec<usize> =
                        (0..gates.len()).filter(|&i| selected[i] == t).collect();
                    if members.is_empty() {
                        continue;
                    }
                    let imgs: Vec<Tensor> = members
                        .iter()
                        .map(|&i| image_at(batch, i))
                        .collect::<Result<_>>()?;
                    let sub = Tensor::stack(&imgs.iter().collect::<Vec<_>>())?;
                    for (&i, s) in members.iter().zip(self.head_scores(t, &sub)?) {
                        slot_scores[i] = Some(s);
                    }
                }
                Ok(gates
                    .into_iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let t = selected[i];
                        let s = slot_scores[i].expect("every image scored once");
                        let mut scores = vec![None; tasks];
                        scores[t] = Some(s);
                        PredictionRecord {
                            image_index: i,
                            scores,
                            weights: g.weights,
                            q_hat: s as f64,
                            mode: ModeTag::Hard,
                        }
                    })
                    .collect())
            }
        }
    }
}

/// Copies image `i` out of an `[N, C, H, W]` batch as `[1, C, H, W]`.
fn image_at(batch: &Tensor, i: usize) -> Result<Tensor> {
    let (_, c, h, w) = batch.dims4()?;
    let len = c * h * w;
    Tensor::new(
        vec![1, c, h, w],
        batch.data()[i * len..(i + 1) * len].to_vec(),
    )
}

/// Oracle score of a single image.
pub fn predict_oracle(
    backbone: &FrozenBackbone,
    registry: &BankRegistry,
    image: &Tensor,
    task_id: &str,
) -> Result<f32> {
    Ok(Predictor::new(backbone, registry, None).oracle(&Tensor::stack(&[image])?, task_id)?[0])
}

/// Scores of a single image under every registered head.
pub fn predict_all_heads(
    backbone: &FrozenBackbone,
    registry: &BankRegistry,
    image: &Tensor,
) -> Result<Vec<f32>> {
    Ok(Predictor::new(backbone, registry, None)
        .all_heads(&Tensor::stack(&[image])?)?
        .remove(0))
}

/// Gated prediction for a single image.
pub fn predict_gated(
    backbone: &FrozenBackbone,
    registry: &BankRegistry,
    store: &CentroidStore,
    image: &Tensor,
    mode: GateMode,
) -> Result<PredictionRecord> {
    Ok(Predictor::new(backbone, registry, Some(store))
        .gated(&Tensor::stack(&[image])?, mode)?
        .remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_tags_render() {
        assert_eq!(ModeTag::Oracle("blur".into()).to_string(), "oracle:blur");
        assert_eq!(ModeTag::Soft.to_string(), "soft");
        assert_eq!(ModeTag::Hard.to_string(), "hard");
    }
}
