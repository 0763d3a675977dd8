//! Per-task normalization banks and the registry that owns them.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PredictionHead};
use crate::error::{invalid, Error, Result};
use crate::numerics::BnParams;

/// Identifier under which the distortion-aware gating bank is stored.
pub const GATING_BANK_ID: &str = "__distortion_aware__";

/// One 4-tuple of normalization parameters per backbone stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskNormBank {
    task_id: String,
    sites: Vec<BnParams>,
    frozen: bool,
}

impl TaskNormBank {
    /// Identity-initialized bank: γ=1, β=0, μ=0, variance=1 at every site.
    pub fn init(config: &BackboneConfig, task_id: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            sites: config
                .stage_channels
                .iter()
                .map(|&c| BnParams::identity(c))
                .collect(),
            frozen: false,
        }
    }

    /// Rebuilds a bank from stored parts (used by checkpoint loading).
    pub fn from_parts(task_id: String, sites: Vec<BnParams>, frozen: bool) -> Result<Self> {
        for (i, s) in sites.iter().enumerate() {
            let c = s.gamma.len();
            if s.beta.len() != c || s.mean.len() != c || s.var.len() != c {
                return Err(invalid(format!("site {i} has ragged parameter vectors")));
            }
            if s.var.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::CorruptedBank(format!(
                    "site {i} has a negative variance"
                )));
            }
        }
        Ok(Self {
            task_id,
            sites,
            frozen,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn sites(&self) -> &[BnParams] {
        &self.sites
    }

    /// Mutable access for training; refused once frozen.
    pub fn sites_mut(&mut self) -> Result<&mut [BnParams]> {
        if self.frozen {
            return Err(Error::State(format!("bank `{}` is frozen", self.task_id)));
        }
        Ok(&mut self.sites)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) -> Result<()> {
        if self.frozen {
            return Err(Error::State(format!(
                "bank `{}` is already frozen",
                self.task_id
            )));
        }
        self.frozen = true;
        Ok(())
    }

    pub fn site_channels(&self) -> Vec<usize> {
        self.sites.iter().map(BnParams::channels).collect()
    }

    /// Number of trainable scalars (γ and β at every site).
    pub fn trainable_len(&self) -> usize {
        2 * self.sites.iter().map(BnParams::channels).sum::<usize>()
    }

    /// Little-endian dump of every parameter, site by site in
    /// mean/var/gamma/beta order. Used for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.sites {
            for v in s.mean.iter().chain(&s.var).chain(&s.gamma).chain(&s.beta) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub(crate) fn matches_config(&self, config: &BackboneConfig) -> bool {
        self.site_channels() == config.stage_channels
    }
}

/// Consumes a bank and returns it frozen.
pub fn freeze_bank(mut bank: TaskNormBank) -> Result<TaskNormBank> {
    bank.freeze()?;
    Ok(bank)
}

/// A registered task: its frozen bank and its head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub bank: TaskNormBank,
    pub head: PredictionHead,
}

/// Insertion-ordered task banks and heads, plus the gating bank.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BankRegistry {
    entries: Vec<TaskEntry>,
    gating: Option<TaskNormBank>,
}

impl BankRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.position(task_id).is_some()
    }

    pub fn position(&self, task_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.bank.task_id() == task_id)
    }

    pub fn entries(&self) -> &[TaskEntry] {
        &self.entries
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.bank.task_id().to_string())
            .collect()
    }

    pub fn entry(&self, task_id: &str) -> Option<&TaskEntry> {
        self.entries.iter().find(|e| e.bank.task_id() == task_id)
    }

    /// Appends a task. The bank must be frozen and structurally identical to
    /// the ones already present.
    pub fn insert(&mut self, bank: TaskNormBank, head: PredictionHead) -> Result<()> {
        if bank.task_id() == GATING_BANK_ID {
            return Err(invalid("the gating identifier is reserved"));
        }
        if self.contains(bank.task_id()) {
            return Err(Error::State(format!(
                "task `{}` is already registered",
                bank.task_id()
            )));
        }
        if !bank.is_frozen() {
            return Err(Error::State(format!(
                "bank `{}` must be frozen first",
                bank.task_id()
            )));
        }
        if head.task_id != bank.task_id() {
            return Err(invalid("head and bank belong to different tasks"));
        }
        if let Some(first) = self.entries.first() {
            if first.bank.site_channels() != bank.site_channels()
                || first.head.weight.len() != head.weight.len()
            {
                return Err(invalid("bank layout differs from the registered banks"));
            }
        }
        self.entries.push(TaskEntry { bank, head });
        Ok(())
    }

    pub fn gating_bank(&self) -> Option<&TaskNormBank> {
        self.gating.as_ref()
    }

    pub fn install_gating_bank(&mut self, bank: TaskNormBank) -> Result<()> {
        if bank.task_id() != GATING_BANK_ID {
            return Err(invalid(format!(
                "gating bank must use id `{GATING_BANK_ID}`"
            )));
        }
        if !bank.is_frozen() {
            return Err(Error::State(
                "gating bank must be frozen before installation".into(),
            ));
        }
        if self.gating.is_some() {
            return Err(Error::State("a gating bank is already installed".into()));
        }
        self.gating = Some(bank);
        Ok(())
    }
}

/// Trainable scalars added per task: γ and β for every normalization channel
/// plus the head's weights (and bias when counted).
pub fn trainable_params(bn_channels: &[usize], head_inputs: usize, head_bias: bool) -> usize {
    2 * bn_channels.iter().sum::<usize>() + head_inputs + usize::from(head_bias)
}

/// Per-task trainable parameter count for registry banks over `config`.
pub fn count_task_params(registry: &BankRegistry, config: &BackboneConfig) -> Result<usize> {
    let first = registry
        .entries()
        .first()
        .ok_or_else(|| Error::State("registry holds no banks".into()))?;
    if !first.bank.matches_config(config) {
        return Err(invalid("registry banks do not match the backbone config"));
    }
    Ok(first.bank.trainable_len() + first.head.weight.len() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{batchnorm_eval, Tensor};

    fn registered(config: &BackboneConfig, id: &str) -> (TaskNormBank, PredictionHead) {
        let bank = freeze_bank(TaskNormBank::init(config, id)).unwrap();
        (
            bank,
            PredictionHead::zeros(id, *config.stage_channels.last().unwrap()),
        )
    }

    #[test]
    fn fresh_bank_is_identity_and_reproducible() {
        let cfg = BackboneConfig::default();
        let a = TaskNormBank::init(&cfg, "t");
        let b = TaskNormBank::init(&cfg, "t");
        assert_eq!(a.to_bytes(), b.to_bytes());
        let x = Tensor::new(vec![1, 8, 2, 2], (0..32).map(|v| v as f32 - 7.0).collect()).unwrap();
        assert_eq!(batchnorm_eval(&x, &a.sites()[0], 0.0).unwrap(), x);
        assert_eq!(a.trainable_len(), 240);
    }

    #[test]
    fn per_task_count_for_default_config() {
        let cfg = BackboneConfig::default();
        let mut reg = BankRegistry::new();
        assert!(count_task_params(&reg, &cfg).is_err());
        let (b, h) = registered(&cfg, "a");
        reg.insert(b, h).unwrap();
        assert_eq!(count_task_params(&reg, &cfg).unwrap(), 305);
        assert_eq!(trainable_params(&cfg.stage_channels, 64, true), 305);
    }

    #[test]
    fn total_grows_by_the_per_task_count() {
        let cfg = BackboneConfig::default();
        let mut reg = BankRegistry::new();
        let total = |r: &BankRegistry| -> usize {
            r.entries()
                .iter()
                .map(|e| e.bank.trainable_len() + e.head.weight.len() + 1)
                .sum()
        };
        for (i, id) in ["a", "b", "c"].iter().enumerate() {
            let (b, h) = registered(&cfg, id);
            reg.insert(b, h).unwrap();
            assert_eq!(
                total(&reg),
                (i + 1) * count_task_params(&reg, &cfg).unwrap()
            );
        }
    }

    #[test]
    fn freeze_blocks_mutation_and_double_freeze() {
        let cfg = BackboneConfig::default();
        let mut bank = freeze_bank(TaskNormBank::init(&cfg, "t")).unwrap();
        assert!(matches!(bank.sites_mut(), Err(Error::State(_))));
        assert!(matches!(bank.freeze(), Err(Error::State(_))));
    }

    #[test]
    fn registry_rejects_duplicates_and_unfrozen() {
        let cfg = BackboneConfig::default();
        let mut reg = BankRegistry::new();
        let (b, h) = registered(&cfg, "a");
        reg.insert(b.clone(), h.clone()).unwrap();
        assert!(matches!(reg.insert(b, h), Err(Error::State(_))));
        let open = TaskNormBank::init(&cfg, "b");
        assert!(reg.insert(open, PredictionHead::zeros("b", 64)).is_err());
        let small = BackboneConfig {
            stage_channels: vec![4, 4, 4, 4],
            ..cfg.clone()
        };
        let (b, h) = registered(&small, "c");
        assert!(reg.insert(b, h).is_err());
    }

    #[test]
    fn gating_bank_uses_reserved_id() {
        let cfg = BackboneConfig::default();
        let mut reg = BankRegistry::new();
        let wrong = freeze_bank(TaskNormBank::init(&cfg, "x")).unwrap();
        assert!(reg.install_gating_bank(wrong).is_err());
        let g = freeze_bank(TaskNormBank::init(&cfg, GATING_BANK_ID)).unwrap();
        reg.install_gating_bank(g.clone()).unwrap();
        assert!(reg.install_gating_bank(g).is_err());
        assert!(reg.is_empty());
    }
}
