//! `train`: one run directory per seed, metric logs, checkpoints and a cross-seed summary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use alchemy_core::codec::encode_episode;
use alchemy_core::metrics::{stage_report, MetricCurve, StageCriteria, StageReport};
use alchemy_core::seed::derive_seed;
use alchemy_core::task::TaskKind;
use alchemy_core::Episode;
use alchemy_model::{evaluate_with_loss, Checkpoint, Example, ModelError, Trainer, Transformer};
use serde::{Deserialize, Serialize};

use crate::analysis::{self, Columns};
use crate::config::{canonical_json, RunConfig};
use crate::dataset::{self, read_jsonl, write_file, Dataset};
use crate::CliError;

pub const LOG_SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUN_FILE: &str = "run.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

const MODEL_INIT_STREAM: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLogRow {
    pub schema_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub task_kind: TaskKind,
    pub k: usize,
    pub epoch: usize,
    pub split: String,
    pub learning_rate: f64,
    /// Mean training loss of this epoch; evaluation loss at epoch 0.
    pub train_loss: f64,
    /// Loss on this split: in-step for train, dropout-free for val.
    pub loss: f64,
    #[serde(flatten)]
    pub metrics: Columns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub dataset_hash: String,
    pub dataset_files: BTreeMap<String, String>,
    pub n_params: usize,
    pub status: RunStatus,
    pub epochs_completed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<StageReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sem: Option<f64>,
    pub n: usize,
}

/// Mean and standard error (sample sd / sqrt n) of the present values.
pub fn aggregate(values: &[Option<f64>]) -> Option<Aggregate> {
    let xs: Vec<f64> = values.iter().flatten().copied().collect();
    let n = xs.len();
    if n == 0 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sem = (n >= 2).then(|| {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    Some(Aggregate { mean, sem, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run_id: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub completed_seeds: Vec<u64>,
    /// Seeds stopped early by an epoch limit; training again resumes them.
    pub pending_seeds: Vec<u64>,
    pub failed_seeds: BTreeMap<String, String>,
    pub final_epoch: usize,
    /// Final-epoch validation metrics across completed seeds.
    pub final_val: BTreeMap<String, Aggregate>,
    pub best_val_accuracy: Option<Aggregate>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub summary: Summary,
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_root().join("runs").join(cfg.run_id())
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn encode_split(episodes: &[Episode], max_seq_len: usize) -> Result<Vec<Example>, CliError> {
    episodes
        .iter()
        .map(|e| {
            let enc = encode_episode(e, max_seq_len).map_err(|err| CliError::Config(format!("model.max_seq_len: {err}")))?;
            Ok(Example::new(&enc.tokens, enc.label as usize))
        })
        .collect()
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricLogRow>, CliError> {
    read_jsonl(path)
}

fn write_rows(path: &Path, rows: &[MetricLogRow]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| io_err(path, e))?;
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

fn append_rows(path: &Path, rows: &[MetricLogRow]) -> Result<(), CliError> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| io_err(path, e))?;
        writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
    }
    f.flush().map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    write_file(path, format!("{text}\n").as_bytes())
}

struct SeedRun<'a> {
    cfg: &'a RunConfig,
    ds: &'a Dataset,
    train: Vec<Example>,
    val: Vec<Example>,
    run_id: String,
    config_hash: String,
}

impl SeedRun<'_> {
    fn row(&self, seed: u64, epoch: usize, split: &str, lr: f64, train_loss: f64, loss: f64, metrics: Columns) -> MetricLogRow {
        MetricLogRow {
            schema_version: LOG_SCHEMA_VERSION,
            run_id: self.run_id.clone(),
            config_hash: self.config_hash.clone(),
            seed,
            task_kind: self.cfg.task_kind,
            k: self.cfg.k,
            epoch,
            split: split.to_string(),
            learning_rate: lr,
            train_loss,
            loss,
            metrics,
        }
    }

    fn split_columns(&self, episodes: &[Episode], predictions: &[usize]) -> Result<Columns, CliError> {
        let recs = analysis::records(self.ds, episodes, predictions)?;
        Ok(analysis::columns(&recs)?.1)
    }

    fn val_metrics(&self, model: &Transformer) -> Result<(Columns, f64), CliError> {
        let (preds, loss) = evaluate_with_loss(model, &self.val).map_err(runtime)?;
        let p: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
        Ok((self.split_columns(&self.ds.val, &p)?, loss))
    }

    fn run_seed(&self, seed: u64, dir: &Path, fresh: bool, until: Option<usize>) -> Result<RunRecord, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let metrics_path = dir.join(METRICS_FILE);
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        let run_path = dir.join(RUN_FILE);
        let cfg = self.cfg;
        let epochs = cfg.optimizer.epochs;
        let stop = until.map_or(epochs, |u| u.min(epochs));

        let mut trainer = if !fresh && ckpt_path.exists() {
            let ckpt = Checkpoint::load(&ckpt_path).map_err(runtime)?;
            if ckpt.config_hash != self.config_hash {
                return Err(CliError::Validation(format!(
                    "{}: checkpoint belongs to config {}",
                    ckpt_path.display(),
                    ckpt.config_hash
                )));
            }
            let t = Trainer::from_checkpoint(ckpt).map_err(runtime)?;
            let kept: Vec<MetricLogRow> = if metrics_path.exists() {
                read_rows(&metrics_path)?.into_iter().filter(|r| r.epoch <= t.epoch()).collect()
            } else {
                Vec::new()
            };
            write_rows(&metrics_path, &kept)?;
            t
        } else {
            let model = Transformer::new(cfg.model.clone(), derive_seed(seed, &[MODEL_INIT_STREAM])).map_err(runtime)?;
            let t = Trainer::new(model, cfg.optimizer.clone(), seed).map_err(runtime)?;
            let (train_preds, train_loss) = evaluate_with_loss(t.model(), &self.train).map_err(runtime)?;
            let p: Vec<usize> = train_preds.iter().map(|p| p.predicted).collect();
            let train_cols = self.split_columns(&self.ds.train, &p)?;
            let (val_cols, val_loss) = self.val_metrics(t.model())?;
            let lr = t.learning_rate(self.train.len()).map_err(runtime)?;
            write_rows(
                &metrics_path,
                &[
                    self.row(seed, 0, "train", lr, train_loss, train_loss, train_cols),
                    self.row(seed, 0, "val", lr, train_loss, val_loss, val_cols),
                ],
            )?;
            if ckpt_path.exists() {
                fs::remove_file(&ckpt_path).map_err(|e| io_err(&ckpt_path, e))?;
            }
            t
        };

        let mut record = RunRecord {
            run_id: self.run_id.clone(),
            config_hash: self.config_hash.clone(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_hash: self.ds.manifest.dataset_hash.clone(),
            dataset_files: self.ds.manifest.files.clone(),
            n_params: trainer.model().num_params(),
            status: RunStatus::Running,
            epochs_completed: trainer.epoch(),
            failure: None,
            stages: None,
        };
        write_json(&run_path, &record)?;

        while trainer.epoch() < stop {
            let stats = match trainer.train_epoch(&self.train) {
                Ok(s) => s,
                Err(e @ ModelError::Divergence { .. }) => {
                    record.status = RunStatus::Failed;
                    record.failure = Some(e.to_string());
                    record.epochs_completed = trainer.epoch();
                    write_json(&run_path, &record)?;
                    return Ok(record);
                }
                Err(e) => return Err(runtime(e)),
            };
            let epoch = stats.epoch;
            if epoch % cfg.log_every == 0 || epoch == epochs {
                let train_cols = self.split_columns(&self.ds.train, &stats.train_predictions)?;
                let (val_cols, val_loss) = self.val_metrics(trainer.model())?;
                append_rows(
                    &metrics_path,
                    &[
                        self.row(seed, epoch, "train", stats.learning_rate, stats.train_loss, stats.train_loss, train_cols),
                        self.row(seed, epoch, "val", stats.learning_rate, stats.train_loss, val_loss, val_cols),
                    ],
                )?;
            }
            if epoch % cfg.checkpoint_every == 0 || epoch == stop {
                trainer.checkpoint(&self.config_hash).save(&ckpt_path).map_err(runtime)?;
                record.epochs_completed = epoch;
                write_json(&run_path, &record)?;
            }
        }
        record.epochs_completed = trainer.epoch();
        if trainer.epoch() < epochs {
            write_json(&run_path, &record)?;
            return Ok(record);
        }
        record.status = RunStatus::Completed;
        record.stages = Some(stages(cfg.task_kind, &read_rows(&metrics_path)?));
        write_json(&run_path, &record)?;
        Ok(record)
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Threshold crossings of the factorized validation curves.
pub fn stages(kind: TaskKind, rows: &[MetricLogRow]) -> StageReport {
    let names: &[&str] = match kind {
        TaskKind::Composition => &["p_a", "p_r_given_a", "p_c_given_ar", "accuracy"],
        _ => &["p_a", "p_b_given_a", "p_c_given_ab", "accuracy"],
    };
    let val: Vec<&MetricLogRow> = rows.iter().filter(|r| r.split == "val").collect();
    let curves: Vec<MetricCurve> = names
        .iter()
        .map(|n| MetricCurve {
            name: n.to_string(),
            epochs: val.iter().map(|r| r.epoch).collect(),
            values: val.iter().map(|r| r.metrics.get(*n).copied().flatten()).collect(),
        })
        .collect();
    stage_report(&curves, StageCriteria::default())
}

/// Trains every seed of `cfg`; divergence in one seed does not stop the others.
pub fn cmd_train(cfg: &RunConfig, fresh: bool) -> Result<TrainOutcome, CliError> {
    cmd_train_until(cfg, fresh, None)
}

/// Like [`cmd_train`], but each seed stops after epoch `until` with a checkpoint so a later call resumes it.
pub fn cmd_train_until(cfg: &RunConfig, fresh: bool, until: Option<usize>) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let ds = dataset::ensure(cfg)?;
    let run_dir = run_dir(cfg);
    fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
    let config_hash = cfg.config_hash();
    let mut stored = cfg.clone();
    stored.output_dir = None;
    write_file(&run_dir.join(CONFIG_FILE), format!("{}\n", canonical_json(&stored)).as_bytes())?;

    let runner = SeedRun {
        cfg,
        train: encode_split(&ds.train, cfg.model.max_seq_len)?,
        val: encode_split(&ds.val, cfg.model.max_seq_len)?,
        ds: &ds,
        run_id: cfg.run_id(),
        config_hash: config_hash.clone(),
    };
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        records.push(runner.run_seed(seed, &seed_dir(&run_dir, seed), fresh, until)?);
    }
    let summary = summarize(cfg, &run_dir, &records)?;
    write_json(&run_dir.join(SUMMARY_FILE), &summary)?;
    Ok(TrainOutcome { run_dir, summary })
}

fn summarize(cfg: &RunConfig, run_dir: &Path, records: &[RunRecord]) -> Result<Summary, CliError> {
    let mut finals: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    let mut best = Vec::new();
    let mut completed = Vec::new();
    let mut failed = BTreeMap::new();
    let mut pending = Vec::new();
    for r in records {
        if r.status == RunStatus::Running {
            pending.push(r.seed);
            continue;
        }
        if r.status != RunStatus::Completed {
            failed.insert(r.seed.to_string(), r.failure.clone().unwrap_or_default());
            continue;
        }
        completed.push(r.seed);
        let rows = read_rows(&seed_dir(run_dir, r.seed).join(METRICS_FILE))?;
        let val: Vec<&MetricLogRow> = rows.iter().filter(|x| x.split == "val").collect();
        if let Some(last) = val.last() {
            for (k, v) in &last.metrics {
                finals.entry(k.clone()).or_default().push(*v);
            }
        }
        best.push(val.iter().filter_map(|x| x.metrics.get("accuracy").copied().flatten()).reduce(f64::max));
    }
    Ok(Summary {
        run_id: cfg.run_id(),
        config_hash: cfg.config_hash(),
        seeds: cfg.seeds.clone(),
        completed_seeds: completed,
        pending_seeds: pending,
        failed_seeds: failed,
        final_epoch: cfg.optimizer.epochs,
        final_val: finals.into_iter().filter_map(|(k, v)| aggregate(&v).map(|a| (k, a))).collect(),
        best_val_accuracy: aggregate(&best),
    })
}
