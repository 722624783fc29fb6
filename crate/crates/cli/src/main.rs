use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use alchemy_cli::config::RunConfig;
use alchemy_cli::dataset::{dataset_dir, generate};
use alchemy_cli::evaluate::{cmd_evaluate, Source};
use alchemy_cli::export::cmd_export_plots;
use alchemy_cli::sweep::{cmd_sweep, SweepConfig};
use alchemy_cli::train::cmd_train_until;
use alchemy_cli::validate::cmd_validate;
use alchemy_cli::CliError;
use alchemy_core::task::TaskKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "alchemy-stages", version, about = "Staged latent-structure learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file.
#[derive(Args, Default)]
struct Overrides {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to $ALCHEMY_STAGES_OUT or ./out.
    #[arg(long, env = "ALCHEMY_STAGES_OUT")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    task_kind: Option<TaskKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    pool_size: Option<u32>,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut c = RunConfig::load(&self.config)?;
        if self.output_dir.is_some() {
            c.output_dir = self.output_dir.clone();
        }
        if let Some(v) = self.task_kind {
            c.task_kind = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = &self.seeds {
            c.seeds = v.clone();
        }
        if let Some(v) = self.epochs {
            c.optimizer.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            c.optimizer.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            c.optimizer.weight_decay = v;
        }
        if let Some(v) = self.pool_size {
            c.dataset.pool_size = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate chemistries and episodes and write a hashed manifest.
    Generate {
        #[command(flatten)]
        run: Overrides,
        /// Dataset directory; defaults to <output root>/datasets/<hash>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per seed, resuming from checkpoints when present.
    Train {
        #[command(flatten)]
        run: Overrides,
        /// Ignore existing checkpoints and start over.
        #[arg(long)]
        fresh: bool,
        /// Stop each seed after this epoch with a checkpoint; rerun to continue.
        #[arg(long)]
        until_epoch: Option<usize>,
    },
    /// Expand a hyperparameter grid and train every point.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "ALCHEMY_STAGES_OUT")]
        output_dir: Option<PathBuf>,
        /// List the expanded runs without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Factorized metrics for a predictions file or a checkpoint.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// JSONL with {"episode": i, "predicted": class} per line.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the predictions used.
        #[arg(long)]
        write_predictions: Option<PathBuf>,
    },
    /// Write tidy per-figure CSV tables from run directories.
    ExportPlots {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        figure: Option<String>,
    },
    /// Check a chemistry file, an episode file or a dataset directory.
    Validate { path: PathBuf },
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

/// Writes to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

fn write_out(path: Option<&PathBuf>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, format!("{text}\n")).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            emit(text);
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Generate { run, out } => {
            let cfg = run.load()?;
            let dir = out.unwrap_or_else(|| dataset_dir(&cfg));
            let m = generate(&cfg, &dir)?;
            emit(&format!("dataset {}", dir.display()));
            emit(&format!("content_hash {}", m.content_hash()));
            emit(&format!(
                "chemistries {} (train {}, val {}), episodes train {} val {}",
                m.n_chemistries,
                m.split.train_chemistries.len(),
                m.split.val_chemistries.len(),
                m.n_train_episodes,
                m.n_val_episodes
            ));
            Ok(0)
        }
        Command::Train { run, fresh, until_epoch } => {
            let cfg = run.load()?;
            let outcome = cmd_train_until(&cfg, fresh, until_epoch)?;
            let s = &outcome.summary;
            emit(&format!("run {}", outcome.run_dir.display()));
            emit(&to_json(&serde_json::json!({
                "run_id": s.run_id,
                "completed_seeds": s.completed_seeds,
                "pending_seeds": s.pending_seeds,
                "failed_seeds": s.failed_seeds,
                "final_epoch": s.final_epoch,
                "final_val_accuracy": s.final_val.get("accuracy"),
                "best_val_accuracy": s.best_val_accuracy,
            })));
            Ok(if outcome.summary.failed_seeds.is_empty() { 0 } else { 2 })
        }
        Command::Sweep { config, output_dir, dry_run } => {
            let mut cfg = SweepConfig::load(&config)?;
            if output_dir.is_some() {
                cfg.base.output_dir = output_dir;
            }
            let (dir, rows) = cmd_sweep(&cfg, dry_run)?;
            emit(&format!("sweep {} ({} runs)", dir.display(), rows.len()));
            let failed = rows.iter().filter(|r| r.status == "error" || r.status == "failed").count();
            Ok(if failed == 0 { 0 } else { 2 })
        }
        Command::Evaluate {
            dataset,
            split,
            predictions,
            checkpoint,
            out,
            write_predictions,
        } => {
            let source = match (&predictions, &checkpoint) {
                (Some(p), _) => Source::Predictions(p),
                (None, Some(c)) => Source::Checkpoint(c),
                (None, None) => return Err(CliError::Config("evaluate: --predictions or --checkpoint required".into())),
            };
            let (report, rows) = cmd_evaluate(&dataset, &split, source)?;
            if let Some(p) = write_predictions {
                let text: Vec<String> = rows.iter().map(|r| serde_json::to_string(r).expect("row")).collect();
                write_out(Some(&p), &text.join("\n"))?;
            }
            write_out(out.as_ref(), &to_json(&report))?;
            Ok(0)
        }
        Command::ExportPlots { run_dirs, out, figure } => {
            for p in cmd_export_plots(&run_dirs, &out, figure.as_deref())? {
                emit(&p.display().to_string());
            }
            Ok(0)
        }
        Command::Validate { path } => {
            let summary = cmd_validate(&path)?;
            emit(&to_json(&summary));
            Ok(if summary.passed { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
