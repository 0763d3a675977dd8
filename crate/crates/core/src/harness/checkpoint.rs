//! Checkpoint directories: `manifest.json` plus one tensor file per payload
//! under `payloads/`. The manifest records the format version, the experiment
//! config, task order and a SHA-256 digest and byte length for every payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::sequence::{Model, RunSummary, SequenceRun};
use super::tensor_io::{decode, encode};
use crate::backbone::{build_backbone, PredictionHead};
use crate::error::{Error, Result};
use crate::gating::{CentroidStore, GatingConfig};
use crate::normbank::{BankRegistry, TaskNormBank, GATING_BANK_ID};
use crate::numerics::{BnParams, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const PAYLOAD_DIR: &str = "payloads";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PayloadRecord {
    name: String,
    bytes: u64,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: ExperimentConfig,
    tasks: Vec<String>,
    has_gating_bank: bool,
    gating: Option<GatingConfig>,
    results: Option<RunSummary>,
    payloads: Vec<PayloadRecord>,
}

/// Everything needed to restore inference, plus the results so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub registry: BankRegistry,
    pub store: Option<CentroidStore>,
    pub results: Option<RunSummary>,
}

fn bank_tensor(site: &BnParams) -> Result<Tensor> {
    let c = site.channels();
    let data = [&site.mean, &site.var, &site.gamma, &site.beta]
        .into_iter()
        .flatten()
        .copied()
        .collect();
    Tensor::new(vec![4, c], data)
}

fn site_from(t: &Tensor, name: &str) -> Result<BnParams> {
    let (rows, _) = t
        .dims2()
        .map_err(|_| Error::Malformed(format!("{name}: expected a [4, C] tensor")))?;
    if rows != 4 {
        return Err(Error::Malformed(format!(
            "{name}: expected a [4, C] tensor"
        )));
    }
    Ok(BnParams {
        mean: t.row(0).to_vec(),
        var: t.row(1).to_vec(),
        gamma: t.row(2).to_vec(),
        beta: t.row(3).to_vec(),
    })
}

fn head_tensor(h: &PredictionHead) -> Result<Tensor> {
    let mut data = h.weight.clone();
    data.push(h.bias);
    Tensor::new(vec![data.len()], data)
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn from_run(config: &ExperimentConfig, run: &SequenceRun) -> Self {
        Self {
            config: config.clone(),
            registry: run.model.registry.clone(),
            store: run.model.store.clone(),
            results: Some(run.summary.clone()),
        }
    }

    /// Rebuilds the model; filters are regenerated from the stored config.
    pub fn model(&self) -> Result<Model> {
        Ok(Model {
            backbone: build_backbone(&self.config.backbone)?,
            registry: self.registry.clone(),
            store: self.store.clone(),
        })
    }

    fn payloads(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        if let Some(g) = self.registry.gating_bank() {
            for (s, site) in g.sites().iter().enumerate() {
                out.push((format!("gating-bank-site{s}.bin"), bank_tensor(site)?));
            }
        }
        for (i, e) in self.registry.entries().iter().enumerate() {
            for (s, site) in e.bank.sites().iter().enumerate() {
                out.push((format!("task{i:03}-bank-site{s}.bin"), bank_tensor(site)?));
            }
            out.push((format!("task{i:03}-head.bin"), head_tensor(&e.head)?));
            if let Some(store) = &self.store {
                if let Some(mats) = store.get(e.bank.task_id()) {
                    for (m, &stage) in mats.iter().zip(&store.config().stages) {
                        out.push((format!("task{i:03}-centroids-stage{stage}.bin"), m.clone()));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Total bytes of all tensor payloads.
    pub fn payload_bytes(&self) -> Result<u64> {
        Ok(self
            .payloads()?
            .iter()
            .map(|(_, t)| (super::tensor_io::HEADER_LEN + 4 * t.len()) as u64)
            .sum())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let pdir = dir.join(PAYLOAD_DIR);
        fs::create_dir_all(&pdir)?;
        let mut records = Vec::new();
        for (name, t) in self.payloads()? {
            let bytes = encode(&t)?;
            fs::write(pdir.join(&name), &bytes)?;
            records.push(PayloadRecord {
                name,
                bytes: bytes.len() as u64,
                sha256: sha_hex(&bytes),
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tasks: self.registry.task_ids(),
            has_gating_bank: self.registry.gating_bank().is_some(),
            gating: self.store.as_ref().map(|s| s.config().clone()),
            results: self.results.clone(),
            payloads: records,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("manifest: {e}")))?;
        let version = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Malformed("manifest has no format version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                found: version as u32,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| Error::Malformed(format!("manifest: {e}")))?;

        let pdir = dir.join(PAYLOAD_DIR);
        let mut loaded = std::collections::HashMap::new();
        for rec in &manifest.payloads {
            let path = pdir.join(&rec.name);
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(Error::Truncated {
                        name: rec.name.clone(),
                        expected: rec.bytes,
                        found: 0,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            if bytes.len() as u64 != rec.bytes {
                return Err(Error::Truncated {
                    name: rec.name.clone(),
                    expected: rec.bytes,
                    found: bytes.len() as u64,
                });
            }
            if sha_hex(&bytes) != rec.sha256 {
                return Err(Error::Checksum(rec.name.clone()));
            }
            loaded.insert(rec.name.clone(), decode(&bytes, &rec.name)?);
        }
        let mut take = |name: String| -> Result<Tensor> {
            loaded
                .remove(&name)
                .ok_or_else(|| Error::Malformed(format!("payload `{name}` is not listed")))
        };

        let sites = manifest.config.backbone.stage_count();
        let read_bank = |take: &mut dyn FnMut(String) -> Result<Tensor>,
                         prefix: &str,
                         id: &str|
         -> Result<TaskNormBank> {
            let parts = (0..sites)
                .map(|s| {
                    let name = format!("{prefix}-site{s}.bin");
                    site_from(&take(name.clone())?, &name)
                })
                .collect::<Result<Vec<_>>>()?;
            TaskNormBank::from_parts(id.to_string(), parts, true)
                .map_err(|e| Error::Malformed(e.to_string()))
        };

        let mut registry = BankRegistry::new();
        if manifest.has_gating_bank {
            registry.install_gating_bank(read_bank(&mut take, "gating-bank", GATING_BANK_ID)?)?;
        }
        let mut store = manifest.gating.clone().map(CentroidStore::new);
        for (i, id) in manifest.tasks.iter().enumerate() {
            let bank = read_bank(&mut take, &format!("task{i:03}-bank"), id)?;
            let h = take(format!("task{i:03}-head.bin"))?.into_data();
            let (bias, weight) = h
                .split_last()
                .ok_or_else(|| Error::Malformed("empty head".into()))?;
            let head = PredictionHead {
                task_id: id.clone(),
                weight: weight.to_vec(),
                bias: *bias,
            };
            registry
                .insert(bank, head)
                .map_err(|e| Error::Malformed(e.to_string()))?;
            if let Some(store) = store.as_mut() {
                let mats = store
                    .config()
                    .stages
                    .clone()
                    .into_iter()
                    .map(|stage| take(format!("task{i:03}-centroids-stage{stage}.bin")))
                    .collect::<Result<Vec<_>>>()?;
                store
                    .insert(id.clone(), mats)
                    .map_err(|e| Error::Malformed(e.to_string()))?;
            }
        }
        if !loaded.is_empty() {
            return Err(Error::Malformed("manifest lists unused payloads".into()));
        }
        Ok(Self {
            config: manifest.config,
            registry,
            store,
            results: manifest.results,
        })
    }
}
