//! File outputs: dataset directories, prediction and metric tables, scalar
//! summaries and the training log. Everything written here is a pure function
//! of its inputs so reruns produce identical bytes.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::tensor_io::encode;
use crate::error::Result;
use crate::metrics::SequenceResults;
use crate::predictor::PredictionRecord;
use crate::synthdata::{DistortionKind, Split, TaskDataset, TaskSpec};
use crate::trainer::{TrainConfig, TrainReport};

#[derive(Serialize)]
struct SampleEntry<'a> {
    split: &'a str,
    index: usize,
    mos: f32,
    kind: DistortionKind,
    level: f32,
    source_id: u64,
    file: String,
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    task_id: &'a str,
    spec: &'a TaskSpec,
    samples: Vec<SampleEntry<'a>>,
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `dir/<task_id>/manifest.json` and one tensor file per image.
pub fn export_dataset(dir: &Path, ds: &TaskDataset) -> Result<()> {
    let root = dir.join(&ds.task_id);
    let images = root.join("images");
    fs::create_dir_all(&images)?;
    let mut samples = Vec::with_capacity(ds.len());
    for split in [Split::Train, Split::Val, Split::Test] {
        let name = split_name(split);
        for (index, s) in ds.split(split).iter().enumerate() {
            let file = format!("images/{name}-{index:04}.bin");
            fs::write(root.join(&file), encode(&s.image)?)?;
            samples.push(SampleEntry {
                split: name,
                index,
                mos: s.mos,
                kind: s.kind,
                level: s.level,
                source_id: s.source_id,
                file,
            });
        }
    }
    write_json(
        &root.join("manifest.json"),
        &DatasetManifest {
            task_id: &ds.task_id,
            spec: &ds.spec,
            samples,
        },
    )
}

/// Prediction CSV: `image_id, mode, score_<task>..., weight_<task>..., q_hat`.
/// Skipped heads leave their score cell empty.
pub fn write_predictions_csv(
    path: &Path,
    task_ids: &[String],
    rows: &[(String, PredictionRecord)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["image_id".to_string(), "mode".to_string()];
    header.extend(task_ids.iter().map(|t| format!("score_{t}")));
    header.extend(task_ids.iter().map(|t| format!("weight_{t}")));
    header.push("q_hat".into());
    w.write_record(&header)?;
    for (id, r) in rows {
        let mut rec = vec![id.clone(), r.mode.to_string()];
        rec.extend(
            r.scores
                .iter()
                .map(|s| s.map(|v| v.to_string()).unwrap_or_default()),
        );
        rec.extend(r.weights.iter().map(f64::to_string));
        rec.push(r.q_hat.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Square or lower-triangular matrix as CSV; missing cells are empty.
pub fn write_matrix_csv(
    path: &Path,
    corner: &str,
    rows: &[String],
    cols: &[String],
    m: &[Vec<f64>],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![corner.to_string()];
    header.extend(cols.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in rows.iter().zip(m) {
        let mut rec = vec![label.clone()];
        rec.extend((0..cols.len()).map(|j| row.get(j).map(f64::to_string).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// SRCC (`srcc_<tag>.csv`) and cross-model (`cross_<tag>.csv`) matrices.
pub fn write_results_csv(
    dir: &Path,
    tag: &str,
    task_ids: &[String],
    r: &SequenceResults,
) -> Result<()> {
    let rows: Vec<String> = task_ids.iter().map(|t| format!("after_{t}")).collect();
    write_matrix_csv(
        &dir.join(format!("srcc_{tag}.csv")),
        "model",
        &rows,
        task_ids,
        &r.srcc,
    )?;
    write_matrix_csv(
        &dir.join(format!("cross_{tag}.csv")),
        "model",
        &rows,
        task_ids,
        &r.cross,
    )
}

pub fn write_scalars_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

/// One row per epoch: task, epoch (1-based), learning rate, mean pair loss,
/// and the validation SRCC on the task's final row.
pub fn write_train_log(path: &Path, config: &TrainConfig, reports: &[TrainReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task_id", "epoch", "lr", "loss", "val_srcc"])?;
    for r in reports {
        for (e, loss) in r.epoch_losses.iter().enumerate() {
            let val = if e + 1 == r.epoch_losses.len() {
                r.val_srcc.map(|v| v.to_string()).unwrap_or_default()
            } else {
                String::new()
            };
            w.write_record([
                r.task_id.clone(),
                (e + 1).to_string(),
                config.lr_at(e).to_string(),
                loss.to_string(),
                val,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
