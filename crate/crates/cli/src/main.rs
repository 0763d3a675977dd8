//! Command-line front end: data generation, training, evaluation and the
//! robustness and KL analyses. Every command writes its outputs under `--out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use taskbn::gating::GateMode;
use taskbn::harness::export::{
    export_dataset, write_matrix_csv, write_predictions_csv, write_results_csv, write_scalars_json,
    write_train_log,
};
use taskbn::harness::{
    analyze_kl, prepare_gating_corpus, prepare_task, pretrain_gating, run_order_suite,
    run_sequence, Baseline, Checkpoint, ExperimentConfig, Model, OrderLabel, Seeds, SHARED_BANK_ID,
};
use taskbn::metrics::srcc;
use taskbn::predictor::PredictionRecord;
use taskbn::synthdata::{batch_of, mos_of, TaskDataset};

const EXIT_INVALID_CONFIG: u8 = 2;
const EXIT_CORRUPTED_CHECKPOINT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "taskbn",
    version,
    about = "Continual blind quality regression with task-specific normalization banks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces every seed with values derived from this base.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Train one shared bank instead of one bank per task.
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    TaskAgnosticBn,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Soft,
    Hard,
    Oracle,
}

#[derive(Subcommand)]
enum Command {
    /// Write every task dataset and the gating corpus.
    GenData(Common),
    /// Train the distortion-aware bank and save it as a checkpoint.
    PretrainGating(Common),
    /// Train the full task sequence, save a checkpoint and the metric tables.
    TrainSeq(Common),
    /// Score every task's test split with a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "soft")]
        mode: ModeArg,
    },
    /// Bank KL divergences against cross-task SRCC.
    AnalyzeKl {
        #[command(flatten)]
        common: Common,
        /// Saved model to analyze; the sequence is trained when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the sequence under several task orders.
    Orders {
        #[command(flatten)]
        common: Common,
        /// Comma-separated order labels (I to VIII).
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "I,II,III,IV,V,VI,VII,VIII"
        )]
        orders: Vec<OrderLabel>,
    },
    /// Collect the JSON outputs found under `--out` into one report.
    Report(Common),
}

/// Failure classes that map to dedicated exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Checkpoint(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<taskbn::Error>() {
            Some(inner) if inner.is_corrupted_checkpoint() => Failure::Checkpoint(e),
            Some(taskbn::Error::InvalidArgument(_)) => Failure::Config(e),
            _ => Failure::Other(e),
        }
    }
}

impl From<taskbn::Error> for Failure {
    fn from(e: taskbn::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::Config)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seeds = Seeds::from_base(seed);
    }
    if let Some(BaselineArg::TaskAgnosticBn) = common.baseline {
        config.baseline = Baseline::TaskAgnosticBn;
    }
    config
        .validate()
        .context("invalid experiment config")
        .map_err(Failure::Config)?;
    Ok(config)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(Failure::from)
}

fn datasets(config: &ExperimentConfig) -> taskbn::Result<Vec<TaskDataset>> {
    config
        .ordered_tasks()
        .iter()
        .map(|spec| Ok(prepare_task(config, spec)?.0))
        .collect()
}

fn gen_data(common: &Common) -> Result<(), Failure> {
    let config = load_config(common)?;
    let dir = common.out.join("data");
    for ds in datasets(&config)? {
        export_dataset(&dir, &ds)?;
        println!("{}: {} images", ds.task_id, ds.len());
    }
    let (corpus, _) = prepare_gating_corpus(&config)?;
    export_dataset(&dir, &corpus)?;
    println!("{}: {} images", corpus.task_id, corpus.len());
    Ok(())
}

fn pretrain(common: &Common) -> Result<(), Failure> {
    let config = load_config(common)?;
    let (_, registry, report) = pretrain_gating(&config)?;
    fs::create_dir_all(&common.out).context("creating output directory")?;
    write_train_log(
        &common.out.join("gating_train_log.csv"),
        &config.train,
        std::slice::from_ref(&report),
    )?;
    let ckpt = common.out.join("gating-checkpoint");
    Checkpoint {
        config,
        registry,
        store: None,
        results: None,
    }
    .save(&ckpt)?;
    println!(
        "gating bank: final loss {:.4}, saved to {}",
        report.epoch_losses.last().unwrap_or(&f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn train_seq(common: &Common) -> Result<(), Failure> {
    let config = load_config(common)?;
    let run = run_sequence(&config)?;
    let out = &common.out;
    fs::create_dir_all(out).context("creating output directory")?;
    let ids = &run.summary.task_ids;
    write_results_csv(out, "soft", ids, &run.summary.soft)?;
    if let Some(hard) = &run.summary.hard {
        write_results_csv(out, "hard", ids, hard)?;
    }
    if let Some(oracle) = &run.summary.oracle {
        write_results_csv(out, "oracle", ids, oracle)?;
    }
    write_scalars_json(&out.join("scalars.json"), &run.summary)?;
    write_train_log(
        &out.join("train_log.csv"),
        &config.train,
        &run.train_reports,
    )?;
    Checkpoint::from_run(&config, &run).save(&out.join("checkpoint"))?;
    let s = &run.summary.soft;
    println!(
        "mSRCC {:.4}  mPI {:.4}  mSI {:.4}  mPSI {:.4}",
        s.msrcc, s.mpi, s.msi, s.mpsi
    );
    Ok(())
}

/// Final-model predictions for one test split.
fn records(
    model: &Model,
    ds: &TaskDataset,
    mode: ModeArg,
) -> taskbn::Result<Vec<PredictionRecord>> {
    let predictor = model.predictor();
    let batch = batch_of(&ds.test)?;
    let shared = model.registry.contains(SHARED_BANK_ID);
    if mode == ModeArg::Oracle || shared {
        let id = if shared {
            SHARED_BANK_ID
        } else {
            ds.task_id.as_str()
        };
        return predictor.oracle_records(&batch, id);
    }
    let gate = if mode == ModeArg::Hard {
        GateMode::Hard
    } else {
        GateMode::Soft
    };
    predictor.gated(&batch, gate)
}

fn eval(common: &Common, checkpoint: &Path, mode: ModeArg) -> Result<(), Failure> {
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.registry.is_empty() {
        bail_other("checkpoint holds no trained tasks")?;
    }
    let model = ckpt.model()?;
    let config = ckpt.config;
    let out = &common.out;
    fs::create_dir_all(out).context("creating output directory")?;
    let mut rows = Vec::new();
    let mut per_task = serde_json::Map::new();
    for ds in datasets(&config)? {
        if !model.registry.contains(&ds.task_id) && !model.registry.contains(SHARED_BANK_ID) {
            continue;
        }
        let recs = records(&model, &ds, mode)?;
        let q: Vec<f64> = recs.iter().map(|r| r.q_hat).collect();
        let value = srcc(&q, &mos_of(&ds.test))?;
        println!("{}: SRCC {value:.4}", ds.task_id);
        per_task.insert(ds.task_id.clone(), json!(value));
        rows.extend(
            recs.into_iter()
                .map(|r| (format!("{}/{}", ds.task_id, r.image_index), r)),
        );
    }
    let tag = match mode {
        ModeArg::Soft => "soft",
        ModeArg::Hard => "hard",
        ModeArg::Oracle => "oracle",
    };
    write_predictions_csv(
        &out.join(format!("predictions_{tag}.csv")),
        &model.registry.task_ids(),
        &rows,
    )?;
    let mean =
        per_task.values().filter_map(Value::as_f64).sum::<f64>() / per_task.len().max(1) as f64;
    let summary =
        json!({ "mode": tag, "srcc": per_task, "msrcc": mean, "stored_results": ckpt.results });
    write_scalars_json(&out.join(format!("eval_{tag}.json")), &summary)?;
    println!("mSRCC {mean:.4}");
    Ok(())
}

fn bail_other(msg: &str) -> Result<(), Failure> {
    Err(Failure::Other(anyhow::anyhow!(msg.to_string())))
}

fn kl(common: &Common, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let (model, data) = match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let data = datasets(&ckpt.config)?;
            (ckpt.model()?, data)
        }
        None => {
            let run = run_sequence(&load_config(common)?)?;
            (run.model, run.datasets)
        }
    };
    if model.registry.contains(SHARED_BANK_ID) {
        bail_other("the KL analysis needs one bank per task")?;
    }
    let analysis = analyze_kl(&model, &data)?;
    let out = &common.out;
    fs::create_dir_all(out).context("creating output directory")?;
    write_matrix_csv(
        &out.join("kl.csv"),
        "bank",
        &analysis.task_ids,
        &analysis.task_ids,
        &analysis.kl,
    )?;
    write_matrix_csv(
        &out.join("cross_task_srcc.csv"),
        "head",
        &analysis.task_ids,
        &analysis.task_ids,
        &analysis.cross_srcc,
    )?;
    write_scalars_json(&out.join("kl.json"), &analysis)?;
    println!("kl_vs_srcc correlation {:.4}", analysis.correlation);
    if let (Some(w), Some(c)) = (analysis.within_family_kl, analysis.cross_family_kl) {
        println!("mean KL within family {w:.4}, across families {c:.4}");
    }
    Ok(())
}

fn orders(common: &Common, labels: &[OrderLabel]) -> Result<(), Failure> {
    let config = load_config(common)?;
    let suite = run_order_suite(&config, labels)?;
    let out = &common.out;
    fs::create_dir_all(out).context("creating output directory")?;
    let mut w = fs::File::create(out.join("orders.csv")).context("creating orders.csv")?;
    use std::io::Write;
    writeln!(w, "order,tasks,msrcc,mpi,msi,mpsi").context("writing orders.csv")?;
    for r in &suite.rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.order,
            r.task_ids.join(" "),
            r.msrcc,
            r.mpi,
            r.msi,
            r.mpsi
        )
        .context("writing orders.csv")?;
        println!(
            "{:>4}  mSRCC {:.4}  mPI {:.4}  mSI {:.4}  mPSI {:.4}",
            r.order, r.msrcc, r.mpi, r.msi, r.mpsi
        );
    }
    let rows: Vec<Value> = suite
        .rows
        .iter()
        .map(|r| json!({ "order": r.order, "tasks": r.task_ids, "msrcc": r.msrcc, "mpi": r.mpi, "msi": r.msi, "mpsi": r.mpsi }))
        .collect();
    let summary = json!({ "rows": rows, "msrcc_spread": suite.msrcc_spread(), "oracle_identical": suite.oracle_identical() });
    write_scalars_json(&out.join("orders.json"), &summary)?;
    println!(
        "mSRCC spread {:.4}, oracle predictions identical: {}",
        suite.msrcc_spread(),
        suite.oracle_identical()
    );
    Ok(())
}

fn report(common: &Common) -> Result<(), Failure> {
    let out = &common.out;
    let mut report = serde_json::Map::new();
    for name in [
        "scalars",
        "orders",
        "kl",
        "eval_soft",
        "eval_hard",
        "eval_oracle",
    ] {
        let path = out.join(format!("{name}.json"));
        if path.exists() {
            let text =
                fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let value: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            report.insert(name.to_string(), value);
        }
    }
    if report.is_empty() {
        bail_other(&format!("no results found under {}", out.display()))?;
    }
    let mut lines = vec!["source,metric,value".to_string()];
    for (source, value) in &report {
        flatten(source, "", value, &mut lines);
    }
    fs::write(out.join("report.csv"), lines.join("\n") + "\n").context("writing report.csv")?;
    write_scalars_json(&out.join("report.json"), &report)?;
    println!("{} sources, {} values", report.len(), lines.len() - 1);
    Ok(())
}

/// Numeric leaves of `value` as `source,path,value` lines.
fn flatten(source: &str, path: &str, value: &Value, lines: &mut Vec<String>) {
    let join = |k: &str| {
        if path.is_empty() {
            k.to_string()
        } else {
            format!("{path}.{k}")
        }
    };
    match value {
        Value::Number(n) => lines.push(format!("{source},{path},{n}")),
        Value::Object(map) => map
            .iter()
            .for_each(|(k, v)| flatten(source, &join(k), v, lines)),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .for_each(|(i, v)| flatten(source, &join(&i.to_string()), v, lines)),
        _ => {}
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::PretrainGating(c) => pretrain(c),
        Command::TrainSeq(c) => train_seq(c),
        Command::Eval {
            common,
            checkpoint,
            mode,
        } => eval(common, checkpoint, *mode),
        Command::AnalyzeKl { common, checkpoint } => kl(common, checkpoint.as_deref()),
        Command::Orders {
            common,
            orders: labels,
        } => orders(common, labels),
        Command::Report(c) => report(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID_CONFIG)
        }
        Err(Failure::Checkpoint(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CORRUPTED_CHECKPOINT)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
