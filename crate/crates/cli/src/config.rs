//! Run configuration, hashing and validation.

use std::path::{Path, PathBuf};

use alchemy_core::task::{SupportMode, TaskKind, TaskSpec};
use alchemy_model::{ModelConfig, OptimizerConfig, Scheduler};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const LEARNING_RATE_GRID: [f64; 7] = [1e-3, 4e-4, 5e-4, 1e-4, 9e-5, 7e-5, 1e-5];
pub const WEIGHT_DECAY_GRID: [f64; 3] = [0.1, 0.01, 0.001];
pub const MIN_LR_GRID: [f64; 6] = [7e-5, 8e-5, 9e-5, 0.000085, 0.000095, 1e-5];
pub const GAMMA_GRID: [f64; 5] = [0.2, 0.4, 0.5, 0.6, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub pool_size: u32,
    pub split_ratio: f64,
    pub episodes_per_chemistry: usize,
    pub support_mode: SupportMode,
    pub max_support: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            pool_size: 1000,
            split_ratio: 0.9,
            episodes_per_chemistry: 8,
            support_mode: SupportMode::NoBacktrack,
            max_support: 96,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task_kind: TaskKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Output root; `ALCHEMY_STAGES_OUT` or `./out` when absent. Not hashed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Validation cadence in epochs.
    #[serde(default = "one")]
    pub log_every: usize,
    /// Checkpoint cadence in epochs.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Permit learning rates, decays and scheduler values outside the sweep grid.
    #[serde(default)]
    pub allow_off_grid: bool,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_k() -> usize {
    1
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn one() -> usize {
    1
}

fn default_checkpoint_every() -> usize {
    10
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

fn on_grid(value: f64, grid: &[f64]) -> bool {
    grid.iter().any(|g| (g - value).abs() <= 1e-12 * g.abs().max(1e-300))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task_kind,
            k: self.k,
            support_mode: self.dataset.support_mode,
            max_support: self.dataset.max_support,
            episodes_per_chemistry: self.dataset.episodes_per_chemistry,
        }
    }

    /// Longest encoded episode the task can produce.
    pub fn required_seq_len(&self) -> usize {
        let k = self.k;
        match self.task_kind {
            TaskKind::WithheldPair => 16 * 11 + 7,
            TaskKind::Composition => 24 * 11 + 6 + k,
            TaskKind::Decomposition => self.dataset.max_support * (10 + k) + 7,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self.task_kind {
            TaskKind::WithheldPair if self.k != 1 => return Err(invalid("k", "withheld_pair uses k = 1")),
            TaskKind::Composition | TaskKind::Decomposition if !(2..=5).contains(&self.k) => {
                return Err(invalid("k", format!("{} outside 2..=5", self.k)))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(invalid("seeds", "duplicate seed"));
        }
        if self.log_every == 0 {
            return Err(invalid("log_every", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(invalid("checkpoint_every", "must be positive"));
        }
        let d = &self.dataset;
        if d.pool_size < 2 {
            return Err(invalid("dataset.pool_size", "need at least 2 chemistries for a split"));
        }
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return Err(invalid("dataset.split_ratio", format!("{} outside (0, 1)", d.split_ratio)));
        }
        if d.episodes_per_chemistry == 0 {
            return Err(invalid("dataset.episodes_per_chemistry", "must be positive"));
        }
        if d.max_support == 0 {
            return Err(invalid("dataset.max_support", "must be positive"));
        }
        self.model.validate().map_err(|e| invalid("model", e))?;
        if self.model.vocab_size != alchemy_core::codec::VOCAB_SIZE {
            return Err(invalid("model.vocab_size", format!("must be {}", alchemy_core::codec::VOCAB_SIZE)));
        }
        if self.model.n_classes != alchemy_core::codec::NUM_CLASSES {
            return Err(invalid("model.n_classes", format!("must be {}", alchemy_core::codec::NUM_CLASSES)));
        }
        let need = self.required_seq_len();
        if self.model.max_seq_len < need {
            return Err(invalid(
                "model.max_seq_len",
                format!("{} is shorter than the {need} tokens this task needs", self.model.max_seq_len),
            ));
        }
        self.optimizer.validate().map_err(|e| invalid("optimizer", e))?;
        if self.optimizer.epochs == 0 {
            return Err(invalid("optimizer.epochs", "must be positive"));
        }
        if !self.allow_off_grid {
            let o = &self.optimizer;
            if !on_grid(o.learning_rate, &LEARNING_RATE_GRID) {
                return Err(invalid("optimizer.learning_rate", format!("{} not in {LEARNING_RATE_GRID:?} (set allow_off_grid)", o.learning_rate)));
            }
            if !on_grid(o.weight_decay, &WEIGHT_DECAY_GRID) {
                return Err(invalid("optimizer.weight_decay", format!("{} not in {WEIGHT_DECAY_GRID:?} (set allow_off_grid)", o.weight_decay)));
            }
            match &o.scheduler {
                Scheduler::Cosine { min_lr } | Scheduler::CosineWithRestarts { min_lr, .. } if !on_grid(*min_lr, &MIN_LR_GRID) => {
                    return Err(invalid("optimizer.scheduler.min_lr", format!("{min_lr} not in {MIN_LR_GRID:?} (set allow_off_grid)")));
                }
                Scheduler::MultiStep { gamma, .. } if !on_grid(*gamma, &GAMMA_GRID) => {
                    return Err(invalid("optimizer.scheduler.gamma", format!("{gamma} not in {GAMMA_GRID:?} (set allow_off_grid)")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// SHA-256 over canonical JSON (sorted keys), excluding the output root.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        sha256_hex(canonical_json(&c).as_bytes())
    }

    pub fn run_id(&self) -> String {
        self.config_hash()[..12].to_string()
    }

    /// Hash of the fields that determine the generated dataset.
    pub fn dataset_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            task_kind: TaskKind,
            k: usize,
            dataset: &'a DatasetConfig,
            max_seq_len: usize,
        }
        let key = Key {
            task_kind: self.task_kind,
            k: self.k,
            dataset: &self.dataset,
            max_seq_len: self.model.max_seq_len,
        };
        sha256_hex(canonical_json(&key).as_bytes())
    }

    pub fn output_root(&self) -> PathBuf {
        output_root(self.output_dir.as_deref())
    }
}

pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    std::env::var_os("ALCHEMY_STAGES_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

/// JSON with object keys sorted at every level.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json's default map is ordered by key.
    let v = serde_json::to_value(value).expect("config serializes");
    serde_json::to_string(&v).expect("value serializes")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
