use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{invalid, Error, Result};
use crate::gating::GatingConfig;
use crate::seed::derive_seed;
use crate::synthdata::{DistortionKind, Family, TaskSpec};
use crate::trainer::TrainConfig;

/// Which model family a sequence run trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// One bank and head per task, gated at inference.
    #[default]
    Tsn,
    /// A single shared bank and head fine-tuned through the sequence.
    TaskAgnosticBn,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsn" => Ok(Self::Tsn),
            "task-agnostic-bn" => Ok(Self::TaskAgnosticBn),
            other => Err(invalid(format!("unknown baseline `{other}`"))),
        }
    }
}

/// Task orders: the listed order, families alternated, families blocked, and
/// the reverse of each.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum OrderLabel {
    #[default]
    I,
    II,
    III,
    IV,
    V,
    VI,
    VII,
    VIII,
}

impl OrderLabel {
    pub const ALL: [OrderLabel; 8] = [
        Self::I,
        Self::II,
        Self::III,
        Self::IV,
        Self::V,
        Self::VI,
        Self::VII,
        Self::VIII,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
            Self::V => "V",
            Self::VI => "VI",
            Self::VII => "VII",
            Self::VIII => "VIII",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Self::I => "listed",
            Self::II => "alternating families",
            Self::III => "synthetic first",
            Self::IV => "realistic first",
            Self::V => "listed, reversed",
            Self::VI => "alternating families, reversed",
            Self::VII => "synthetic first, reversed",
            Self::VIII => "realistic first, reversed",
        }
    }

    /// Permutes `tasks` (given in listed order).
    pub fn apply(self, tasks: &[TaskSpec]) -> Vec<TaskSpec> {
        let (syn, real): (Vec<TaskSpec>, Vec<TaskSpec>) = tasks
            .iter()
            .cloned()
            .partition(|t| t.family() == Family::Synthetic);
        let base = match self {
            Self::I | Self::V => tasks.to_vec(),
            Self::II | Self::VI => {
                let mut out = Vec::with_capacity(tasks.len());
                let (mut a, mut b) = (syn.into_iter(), real.into_iter());
                loop {
                    match (a.next(), b.next()) {
                        (None, None) => break,
                        (x, y) => out.extend(x.into_iter().chain(y)),
                    }
                }
                out
            }
            Self::III | Self::VII => syn.into_iter().chain(real).collect(),
            Self::IV | Self::VIII => real.into_iter().chain(syn).collect(),
        };
        match self {
            Self::V | Self::VI | Self::VII | Self::VIII => base.into_iter().rev().collect(),
            _ => base,
        }
    }
}

impl fmt::Display for OrderLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrderLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown order `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Image content, distortion recipes, splits and pair sampling.
    pub data: u64,
    /// Head initialization and pair shuffling.
    pub training: u64,
    /// K-means seeding.
    pub kmeans: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 17,
            training: 29,
            kmeans: 43,
        }
    }
}

impl Seeds {
    /// Replaces every seed with one derived from `base`.
    pub fn from_base(base: u64) -> Self {
        Self {
            data: derive_seed(base, "data"),
            training: derive_seed(base, "training"),
            kmeans: derive_seed(base, "kmeans"),
        }
    }
}

/// Everything a sequence run depends on. The backbone filter seed lives in
/// `backbone.filter_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Tasks in listed order; `order` permutes them.
    pub tasks: Vec<TaskSpec>,
    pub order: OrderLabel,
    pub images_per_task: usize,
    /// Size of the all-distortion corpus that trains the gating bank.
    pub gating_corpus_images: usize,
    pub seeds: Seeds,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub gating: GatingConfig,
    pub baseline: Baseline,
}

/// Blur, contrast, white noise, salt-and-pepper: families alternate.
pub fn default_tasks() -> Vec<TaskSpec> {
    [
        DistortionKind::Blur,
        DistortionKind::Contrast,
        DistortionKind::WhiteNoise,
        DistortionKind::SaltPepper,
    ]
    .into_iter()
    .map(TaskSpec::single)
    .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tasks: default_tasks(),
            order: OrderLabel::I,
            images_per_task: 100,
            gating_corpus_images: 120,
            seeds: Seeds::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            gating: GatingConfig::default(),
            baseline: Baseline::Tsn,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(invalid("experiment lists no tasks"));
        }
        let mut ids: Vec<&str> = self.tasks.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("task ids must be unique"));
        }
        for t in &self.tasks {
            t.validate()?;
            if t.id.is_empty() || t.id == crate::normbank::GATING_BANK_ID {
                return Err(invalid(format!("task id `{}` is not allowed", t.id)));
            }
        }
        if self.images_per_task < 20 || self.gating_corpus_images < 20 {
            return Err(invalid(
                "tasks and the gating corpus need at least 20 images",
            ));
        }
        self.backbone.validate()?;
        self.train.validate()?;
        self.gating.validate(self.backbone.stage_count())?;
        Ok(())
    }

    /// Tasks in the configured order.
    pub fn ordered_tasks(&self) -> Vec<TaskSpec> {
        self.order.apply(&self.tasks)
    }

    pub fn with_order(&self, order: OrderLabel) -> Self {
        Self {
            order,
            ..self.clone()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub(crate) fn task_seed(&self, purpose: &str, task_id: &str) -> u64 {
        let base = match purpose {
            "train" => self.seeds.training,
            "kmeans" => self.seeds.kmeans,
            _ => self.seeds.data,
        };
        derive_seed(base, &format!("{purpose}/{task_id}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(tasks: &[TaskSpec]) -> Vec<&str> {
        tasks.iter().map(|t| t.id.as_str()).collect()
    }

    #[test]
    fn orders_permute_the_default_sequence() {
        let t = default_tasks();
        assert_eq!(
            ids(&OrderLabel::I.apply(&t)),
            ["blur", "contrast", "white-noise", "salt-pepper"]
        );
        assert_eq!(
            ids(&OrderLabel::II.apply(&t)),
            ["blur", "contrast", "white-noise", "salt-pepper"]
        );
        assert_eq!(
            ids(&OrderLabel::III.apply(&t)),
            ["blur", "white-noise", "contrast", "salt-pepper"]
        );
        assert_eq!(
            ids(&OrderLabel::IV.apply(&t)),
            ["contrast", "salt-pepper", "blur", "white-noise"]
        );
        assert_eq!(
            ids(&OrderLabel::V.apply(&t)),
            ["salt-pepper", "white-noise", "contrast", "blur"]
        );
        assert_eq!(
            ids(&OrderLabel::VIII.apply(&t)),
            ["white-noise", "blur", "salt-pepper", "contrast"]
        );
    }

    #[test]
    fn every_order_is_a_permutation() {
        let mut t = default_tasks();
        t.push(TaskSpec::single(DistortionKind::Resample));
        for o in OrderLabel::ALL {
            let mut a = ids(&o.apply(&t))
                .into_iter()
                .map(String::from)
                .collect::<Vec<_>>();
            a.sort();
            let mut b = ids(&t).into_iter().map(String::from).collect::<Vec<_>>();
            b.sort();
            assert_eq!(a, b, "{o}");
        }
    }

    #[test]
    fn single_task_reverse_is_identity() {
        let t = vec![TaskSpec::single(DistortionKind::Blur)];
        for o in OrderLabel::ALL {
            assert_eq!(o.apply(&t), t);
        }
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), c);
        assert!(ExperimentConfig::from_json(r#"{"images_per_task": 5}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let mut dup = c.clone();
        dup.tasks.push(dup.tasks[0].clone());
        assert!(dup.validate().is_err());
        assert_eq!("iv".parse::<OrderLabel>().unwrap(), OrderLabel::IV);
        assert!("IX".parse::<OrderLabel>().is_err());
        assert_eq!(
            "task-agnostic-bn".parse::<Baseline>().unwrap(),
            Baseline::TaskAgnosticBn
        );
    }
}
