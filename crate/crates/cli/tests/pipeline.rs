use std::fs;
use std::path::{Path, PathBuf};

use alchemy_cli::analysis::PredictionRow;
use alchemy_cli::config::RunConfig;
use alchemy_cli::dataset::{self, generate, CHEMISTRIES_FILE, TRAIN_FILE};
use alchemy_cli::evaluate::{cmd_evaluate, Source};
use alchemy_cli::export::{cmd_export_plots, export_run};
use alchemy_cli::sweep::SweepConfig;
use alchemy_cli::train::{cmd_train, cmd_train_until, read_rows, seed_dir, MetricLogRow, METRICS_FILE};
use alchemy_cli::validate::cmd_validate;
use alchemy_cli::CliError;
use serde_json::Value;

const TINY: &str = r#"
task_kind = "withheld_pair"
k = 1
seeds = [0]
log_every = 1
checkpoint_every = 2
allow_off_grid = true

[dataset]
pool_size = 12
episodes_per_chemistry = 4

[model]
n_layers = 1
d_model = 16
d_ff = 32
n_heads = 2
dropout = 0.1

[optimizer]
learning_rate = 1e-3
weight_decay = 0.01
epochs = 10
batch_size = 8
"#;

fn tiny(out: &Path) -> RunConfig {
    let mut c = RunConfig::from_toml_str(TINY).unwrap();
    c.output_dir = Some(out.to_path_buf());
    c
}

fn rows(run_dir: &Path, seed: u64) -> Vec<MetricLogRow> {
    read_rows(&seed_dir(run_dir, seed).join(METRICS_FILE)).unwrap()
}

#[test]
fn generate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny(a.path());
    let ma = generate(&cfg, a.path()).unwrap();
    let mb = generate(&cfg, b.path()).unwrap();
    assert_eq!(ma.content_hash(), mb.content_hash());
    assert_eq!(ma.files, mb.files);
    for f in ma.files.keys() {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let mut other = cfg.clone();
    other.dataset.seed = 1;
    let c = tempfile::tempdir().unwrap();
    assert_ne!(generate(&other, c.path()).unwrap().content_hash(), ma.content_hash());
}

#[test]
fn default_pool_yields_eight_thousand_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.dataset.pool_size = 1000;
    cfg.dataset.episodes_per_chemistry = 8;
    let m = generate(&cfg, dir.path()).unwrap();
    assert_eq!(m.n_chemistries, 1000);
    assert_eq!(m.split.train_chemistries.len(), 900);
    assert_eq!(m.split.val_chemistries.len(), 100);
    assert_eq!(m.n_train_episodes + m.n_val_episodes, 8000);
    assert_eq!(m.n_train_episodes, 7200);
    let ds = dataset::load(dir.path()).unwrap();
    assert_eq!(ds.train.len(), 7200);
    assert_eq!(ds.val.len(), 800);
}

#[test]
fn training_is_deterministic_and_logs_every_column() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cmd_train(&tiny(a.path()), false).unwrap();
    let rb = cmd_train(&tiny(b.path()), false).unwrap();
    let (xa, xb) = (rows(&ra.run_dir, 0), rows(&rb.run_dir, 0));
    assert_eq!(xa.len(), 22);
    assert_eq!(xa, xb);
    let epochs: Vec<usize> = xa.iter().filter(|r| r.split == "val").map(|r| r.epoch).collect();
    assert_eq!(epochs, (0..=10).collect::<Vec<_>>());
    for r in &xa {
        assert!(r.loss.is_finite() && r.train_loss.is_finite());
        for key in ["accuracy", "p_a", "den.n", "product", "r+15.p_c_given_y_in_tr"] {
            assert!(r.metrics.contains_key(key), "{key} missing at epoch {}", r.epoch);
        }
        assert!(r.metrics["accuracy"].is_some());
        assert!(r.metrics["p_a"].is_some());
    }
    assert_eq!(ra.summary.completed_seeds, vec![0]);
}

#[test]
fn resume_continues_without_duplicate_rows() {
    let full = tempfile::tempdir().unwrap();
    let part = tempfile::tempdir().unwrap();
    let reference = cmd_train(&tiny(full.path()), false).unwrap();

    let cfg = tiny(part.path());
    let stopped = cmd_train_until(&cfg, false, Some(3)).unwrap();
    assert_eq!(stopped.summary.pending_seeds, vec![0]);
    let metrics = seed_dir(&stopped.run_dir, 0).join(METRICS_FILE);
    // A row written after the last checkpoint, as a crash would leave it.
    let mut stale = rows(&stopped.run_dir, 0).pop().unwrap();
    stale.epoch = 4;
    let mut text = fs::read_to_string(&metrics).unwrap();
    text.push_str(&serde_json::to_string(&stale).unwrap());
    text.push('\n');
    fs::write(&metrics, text).unwrap();

    let resumed = cmd_train(&cfg, false).unwrap();
    assert_eq!(resumed.summary.completed_seeds, vec![0]);
    let got = rows(&resumed.run_dir, 0);
    let mut keys: Vec<(usize, String)> = got.iter().map(|r| (r.epoch, r.split.clone())).collect();
    keys.dedup();
    assert_eq!(keys.len(), got.len());
    assert_eq!(got, rows(&reference.run_dir, 0));
}

#[test]
fn export_product_matches_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.seeds = vec![0, 1];
    cfg.optimizer.epochs = 3;
    let run = cmd_train(&cfg, false).unwrap();
    let tables = export_run(&run.run_dir, None).unwrap();
    assert_eq!(
        tables.keys().cloned().collect::<Vec<_>>(),
        vec!["factorized", "reward_adjacency", "reward_binned"]
    );
    let fact = &tables["factorized"];
    for acc in fact.iter().filter(|r| r.series == "accuracy") {
        let find = |s: &str| fact.iter().find(|r| r.series == s && r.split == acc.split && r.epoch == acc.epoch);
        // The product is undefined for a seed whose conditioning event is empty.
        if let Some(p) = find("product_recomputed").filter(|p| p.n == acc.n) {
            assert!((p.mean - acc.mean).abs() <= 1e-12, "epoch {} {}: {} vs {}", acc.epoch, acc.split, p.mean, acc.mean);
        }
        assert!(acc.n == 2 && acc.sem.is_some());
    }
    for seed in [0, 1] {
        for r in rows(&run.run_dir, seed) {
            let get = |k: &str| r.metrics[k];
            let acc = get("accuracy").unwrap();
            match (get("p_a"), get("p_b_given_a"), get("p_c_given_ab")) {
                (Some(a), Some(b), Some(c)) => assert!((a * b * c - acc).abs() <= 1e-12),
                _ => assert_eq!(acc, 0.0),
            }
        }
    }
    let out = dir.path().join("plots");
    let written = cmd_export_plots(std::slice::from_ref(&run.run_dir), &out, Some("factorized")).unwrap();
    assert_eq!(written.len(), 1);
    let text = fs::read_to_string(&written[0]).unwrap();
    assert_eq!(text.lines().next().unwrap(), "figure,run_id,task_kind,k,split,series,epoch,mean,sem,n");
}

#[test]
fn export_reports_missing_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.optimizer.epochs = 1;
    let run = cmd_train(&cfg, false).unwrap();
    let err = export_run(&run.run_dir, Some("extended_neighborhood")).unwrap_err();
    assert!(matches!(err, CliError::MissingMetric(_)), "{err}");
    assert_eq!(err.exit_code(), 1);

    let metrics = seed_dir(&run.run_dir, 0).join(METRICS_FILE);
    let stripped: Vec<String> = fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("p_b_given_a");
            v.to_string()
        })
        .collect();
    fs::write(&metrics, stripped.join("\n")).unwrap();
    let err = export_run(&run.run_dir, None).unwrap_err();
    assert!(matches!(&err, CliError::MissingMetric(m) if m.contains("p_b_given_a")), "{err}");
    assert!(matches!(export_run(&dir.path().join("nope"), None), Err(CliError::MissingMetric(_))));
}

#[test]
fn evaluate_checkpoint_and_predictions_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.optimizer.epochs = 2;
    let run = cmd_train(&cfg, false).unwrap();
    let ds_dir = dataset::dataset_dir(&cfg);
    let ckpt = seed_dir(&run.run_dir, 0).join("checkpoint.bin");
    let (from_ckpt, preds) = cmd_evaluate(&ds_dir, "val", Source::Checkpoint(&ckpt)).unwrap();
    assert!(from_ckpt.chain_rule_exact);
    assert_eq!(from_ckpt.nesting_violations, 0);
    assert_eq!(from_ckpt.n, dataset::load(&ds_dir).unwrap().val.len());

    let path = dir.path().join("preds.jsonl");
    let text: Vec<String> = preds.iter().rev().map(|p| serde_json::to_string(p).unwrap()).collect();
    fs::write(&path, text.join("\n")).unwrap();
    let (from_file, _) = cmd_evaluate(&ds_dir, "val", Source::Predictions(&path)).unwrap();
    assert_eq!(from_file.metrics, from_ckpt.metrics);
    assert!(from_file.chance.contains_key("uniform_in_support"));

    let last = rows(&run.run_dir, 0).into_iter().rfind(|r| r.split == "val").unwrap();
    assert_eq!(last.metrics, from_ckpt.metrics);

    let short: Vec<PredictionRow> = preds[1..].to_vec();
    let text: Vec<String> = short.iter().map(|p| serde_json::to_string(p).unwrap()).collect();
    fs::write(&path, text.join("\n")).unwrap();
    assert!(cmd_evaluate(&ds_dir, "val", Source::Predictions(&path)).is_err());
}

fn small_dataset() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    generate(&tiny(dir.path()), &ds).unwrap();
    (dir, ds)
}

#[test]
fn validate_accepts_generated_data() {
    let (_tmp, ds) = small_dataset();
    let s = cmd_validate(&ds).unwrap();
    assert!(s.passed, "{:?}", s.violations);
    let m = dataset::read_manifest(&ds).unwrap();
    assert_eq!(s.records, m.n_chemistries + m.n_train_episodes + m.n_val_episodes);
    assert!(cmd_validate(&ds.join(TRAIN_FILE)).unwrap().passed);
    assert!(cmd_validate(&ds.join(CHEMISTRIES_FILE)).unwrap().passed);
}

#[test]
fn validate_locates_corrupted_reward() {
    let (_tmp, ds) = small_dataset();
    let path = ds.join(CHEMISTRIES_FILE);
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    let mut v: Value = serde_json::from_str(&lines[2]).unwrap();
    let reward = &mut v["chemistry"]["stones"][0][3];
    *reward = Value::from((reward.as_u64().unwrap() + 1) % 4);
    lines[2] = v.to_string();
    fs::write(&path, lines.join("\n")).unwrap();

    let s = cmd_validate(&path).unwrap();
    assert!(!s.passed);
    let hit = s.violations.iter().find(|v| v.invariant == "reward-distribution").expect("reward-distribution");
    assert_eq!(hit.line, 3);
    assert!(s.violations.iter().all(|v| v.line == 3));
    assert!(s.violation_counts["reward-distribution"] >= 1);
}

#[test]
fn validate_reports_parse_errors_with_line() {
    let (_tmp, ds) = small_dataset();
    let path = ds.join(TRAIN_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let cut = &lines[4][..lines[4].len() / 2];
    lines[4] = cut;
    fs::write(&path, lines[..5].join("\n")).unwrap();
    match cmd_validate(&path).unwrap_err() {
        e @ CliError::Parse { line: 5, .. } => assert_eq!(e.exit_code(), 1),
        other => panic!("unexpected {other}"),
    }
    // Datasets with a modified file fail hash verification.
    assert!(dataset::load(&ds).is_err());
}

#[test]
fn config_errors_name_the_field() {
    let bad = TINY.replace("learning_rate = 1e-3", "learning_rate = -1.0");
    let err = RunConfig::from_toml_str(&bad).unwrap_err();
    assert!(err.to_string().starts_with("optimizer"), "{err}");
    assert_eq!(err.exit_code(), 1);
    let off = TINY.replace("allow_off_grid = true", "allow_off_grid = false").replace("learning_rate = 1e-3", "learning_rate = 2e-3");
    let err = RunConfig::from_toml_str(&off).unwrap_err();
    assert!(err.to_string().starts_with("optimizer.learning_rate"), "{err}");
    assert!(RunConfig::from_toml_str(&TINY.replace("k = 1", "k = 2")).unwrap_err().to_string().starts_with("k"));
}

#[test]
fn sweep_expansion_counts() {
    let base: String = TINY
        .lines()
        .map(|l| match l.strip_prefix('[') {
            Some(rest) => format!("[base.{rest}"),
            None => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n");
    let text = format!("[base]\n{base}\n[grid]\nlearning_rate = [1e-3, 1e-4]\nweight_decay = [0.1, 0.01]\nseeds = [0, 1, 2]\n");
    let sweep = SweepConfig::from_toml_str(&text).unwrap();
    let kids = sweep.expand().unwrap();
    assert_eq!(kids.len(), 12);
    let dir = tempfile::tempdir().unwrap();
    let mut sweep = sweep;
    sweep.base.output_dir = Some(dir.path().to_path_buf());
    let (sdir, planned) = alchemy_cli::sweep::cmd_sweep(&sweep, true).unwrap();
    assert_eq!(planned.len(), 12);
    assert!(planned.iter().all(|r| r.status == "planned"));
    let csv = fs::read_to_string(sdir.join("sweep_summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
}
