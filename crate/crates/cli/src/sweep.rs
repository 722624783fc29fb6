//! `sweep`: Cartesian grid expansion over a base config, one child run per point and seed.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use alchemy_model::Scheduler;
use serde::{Deserialize, Serialize};

use crate::config::{canonical_json, sha256_hex, RunConfig};
use crate::train::cmd_train;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub k: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub weight_decay: Vec<f64>,
    /// Scheduler names: none, cosine, cosine_with_restarts, multi_step.
    pub scheduler: Vec<String>,
    /// Crossed with cosine schedulers only.
    pub min_lr: Vec<f64>,
    /// Crossed with multi_step only.
    pub gamma: Vec<f64>,
    pub milestones: Vec<u64>,
    pub restart_period: Option<u64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    #[serde(default)]
    pub grid: Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub k: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub scheduler: String,
    pub min_lr: Option<f64>,
    pub gamma: Option<f64>,
    pub seed: u64,
}

/// Scheduler name, value, and the `min_lr` / `gamma` it was built from.
type SchedulerChoice = (String, Scheduler, Option<f64>, Option<f64>);

#[derive(Debug, Clone)]
pub struct Child {
    pub point: GridPoint,
    pub config: RunConfig,
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn sweep_id(&self) -> String {
        let mut c = self.clone();
        c.base.output_dir = None;
        sha256_hex(canonical_json(&c).as_bytes())[..12].to_string()
    }

    fn schedulers(&self) -> Result<Vec<SchedulerChoice>, CliError> {
        let g = &self.grid;
        let base = &self.base.optimizer.scheduler;
        if g.scheduler.is_empty() {
            let (min_lr, gamma) = match base {
                Scheduler::Cosine { min_lr } | Scheduler::CosineWithRestarts { min_lr, .. } => (Some(*min_lr), None),
                Scheduler::MultiStep { gamma, .. } => (None, Some(*gamma)),
                Scheduler::None => (None, None),
            };
            return Ok(vec![(base.name().to_string(), base.clone(), min_lr, gamma)]);
        }
        let base_min = match base {
            Scheduler::Cosine { min_lr } | Scheduler::CosineWithRestarts { min_lr, .. } => vec![*min_lr],
            _ => vec![],
        };
        let min_lrs = if g.min_lr.is_empty() { base_min } else { g.min_lr.clone() };
        let base_gamma = match base {
            Scheduler::MultiStep { gamma, .. } => vec![*gamma],
            _ => vec![],
        };
        let gammas = if g.gamma.is_empty() { base_gamma } else { g.gamma.clone() };
        let milestones = if g.milestones.is_empty() {
            match base {
                Scheduler::MultiStep { milestones, .. } => milestones.clone(),
                _ => vec![],
            }
        } else {
            g.milestones.clone()
        };
        let period = g.restart_period.or(match base {
            Scheduler::CosineWithRestarts { period, .. } => Some(*period),
            _ => None,
        });
        let need = |what: &str, name: &str| CliError::Config(format!("grid.{what}: required by scheduler {name}"));
        let mut out = Vec::new();
        for name in &g.scheduler {
            match name.as_str() {
                "none" => out.push((name.clone(), Scheduler::None, None, None)),
                "cosine" | "cosine_with_restarts" => {
                    if min_lrs.is_empty() {
                        return Err(need("min_lr", name));
                    }
                    for &m in &min_lrs {
                        let s = if name == "cosine" {
                            Scheduler::Cosine { min_lr: m }
                        } else {
                            Scheduler::CosineWithRestarts {
                                min_lr: m,
                                period: period.ok_or_else(|| need("restart_period", name))?,
                            }
                        };
                        out.push((name.clone(), s, Some(m), None));
                    }
                }
                "multi_step" => {
                    if gammas.is_empty() {
                        return Err(need("gamma", name));
                    }
                    if milestones.is_empty() {
                        return Err(need("milestones", name));
                    }
                    for &gm in &gammas {
                        let s = Scheduler::MultiStep {
                            milestones: milestones.clone(),
                            gamma: gm,
                        };
                        out.push((name.clone(), s, None, Some(gm)));
                    }
                }
                other => return Err(CliError::Config(format!("grid.scheduler: unknown scheduler {other:?}"))),
            }
        }
        Ok(out)
    }

    /// Every grid point crossed with every seed, deduplicated by config hash.
    pub fn expand(&self) -> Result<Vec<Child>, CliError> {
        let g = &self.grid;
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let ks = if g.k.is_empty() { vec![self.base.k] } else { g.k.clone() };
        let lrs = or(&g.learning_rate, self.base.optimizer.learning_rate);
        let wds = or(&g.weight_decay, self.base.optimizer.weight_decay);
        let seeds = if g.seeds.is_empty() { self.base.seeds.clone() } else { g.seeds.clone() };
        let schedulers = self.schedulers()?;
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &k in &ks {
            for &lr in &lrs {
                for &wd in &wds {
                    for (name, sched, min_lr, gamma) in &schedulers {
                        for &seed in &seeds {
                            let mut c = self.base.clone();
                            c.k = k;
                            c.optimizer.learning_rate = lr;
                            c.optimizer.weight_decay = wd;
                            c.optimizer.scheduler = sched.clone();
                            c.seeds = vec![seed];
                            c.validate()?;
                            if !seen.insert(c.config_hash()) {
                                continue;
                            }
                            out.push(Child {
                                point: GridPoint {
                                    k,
                                    learning_rate: lr,
                                    weight_decay: wd,
                                    scheduler: name.clone(),
                                    min_lr: *min_lr,
                                    gamma: *gamma,
                                    seed,
                                },
                                config: c,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub run_id: String,
    pub k: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub scheduler: String,
    pub min_lr: Option<f64>,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub status: String,
    pub best_val_accuracy: Option<f64>,
    pub final_val_accuracy: Option<f64>,
    pub error: Option<String>,
}

pub fn sweep_dir(cfg: &SweepConfig) -> PathBuf {
    cfg.base.output_root().join("sweeps").join(cfg.sweep_id())
}

/// Runs each child in turn; a failing child is recorded and the sweep continues.
pub fn cmd_sweep(cfg: &SweepConfig, dry_run: bool) -> Result<(PathBuf, Vec<SweepRow>), CliError> {
    let children = cfg.expand()?;
    let dir = sweep_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut rows = Vec::new();
    for child in children {
        let p = &child.point;
        let mut row = SweepRow {
            run_id: child.config.run_id(),
            k: p.k,
            learning_rate: p.learning_rate,
            weight_decay: p.weight_decay,
            scheduler: p.scheduler.clone(),
            min_lr: p.min_lr,
            gamma: p.gamma,
            seed: p.seed,
            status: "planned".into(),
            best_val_accuracy: None,
            final_val_accuracy: None,
            error: None,
        };
        if !dry_run {
            match cmd_train(&child.config, false) {
                Ok(outcome) => {
                    let s = outcome.summary;
                    row.status = if s.failed_seeds.is_empty() { "completed" } else { "failed" }.into();
                    row.error = s.failed_seeds.values().next().cloned();
                    row.best_val_accuracy = s.best_val_accuracy.map(|a| a.mean);
                    row.final_val_accuracy = s.final_val.get("accuracy").map(|a| a.mean);
                }
                Err(e) => {
                    row.status = "error".into();
                    row.error = Some(e.to_string());
                }
            }
        }
        rows.push(row);
    }
    let path = dir.join("sweep_summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok((dir, rows))
}
