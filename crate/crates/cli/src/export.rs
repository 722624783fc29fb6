//! `export-plots`: tidy per-figure tables aggregated across seeds.
//!
//! Each table has columns `figure, run_id, task_kind, k, split, series, epoch, mean, sem, n`.
//! Every factorized figure also carries `product_recomputed`, the per-seed
//! product of the logged factors, averaged like any other series.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use alchemy_core::task::TaskKind;
use serde::Serialize;

use crate::config::RunConfig;
use crate::train::{aggregate, read_rows, MetricLogRow, CONFIG_FILE, METRICS_FILE};
use crate::CliError;

const BINS: [&str; 4] = ["+15", "+1", "-1", "-3"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotRow {
    pub figure: String,
    pub run_id: String,
    pub task_kind: TaskKind,
    pub k: usize,
    pub split: String,
    pub series: String,
    pub epoch: usize,
    pub mean: f64,
    pub sem: Option<f64>,
    pub n: usize,
}

/// Figure names available for a task and their series.
pub fn figures(kind: TaskKind) -> Vec<(&'static str, Vec<String>)> {
    let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let mut out = Vec::new();
    match kind {
        TaskKind::Composition => {
            out.push(("factorized", s(&["accuracy", "p_a", "p_r_given_a", "p_c_given_ar", "product", "product_recomputed"])));
        }
        TaskKind::WithheldPair | TaskKind::Decomposition => {
            out.push((
                "factorized",
                s(&["accuracy", "p_a", "p_b_given_a", "p_c_given_ab", "p_not_b_given_a", "product", "product_recomputed"]),
            ));
        }
    }
    match kind {
        TaskKind::WithheldPair => {
            let per_bin = |metrics: &[&str]| {
                BINS.iter()
                    .flat_map(|b| metrics.iter().map(move |m| format!("r{b}.{m}")))
                    .collect::<Vec<_>>()
            };
            out.push(("reward_binned", per_bin(&["p_c_given_b", "p_c_given_a"])));
            out.push(("reward_adjacency", per_bin(&["p_tr_given_a", "p_nbr_given_a", "p_rr_given_a", "p_c_given_y_in_tr"])));
        }
        TaskKind::Decomposition => out.push(("extended_neighborhood", s(&["accuracy", "p_en_given_a", "p_nr_given_en"]))),
        TaskKind::Composition => {}
    }
    out
}

fn product_recomputed(kind: TaskKind, row: &MetricLogRow) -> Option<f64> {
    let get = |k: &str| row.metrics.get(k).copied().flatten();
    let (mid, last) = match kind {
        TaskKind::Composition => ("p_r_given_a", "p_c_given_ar"),
        _ => ("p_b_given_a", "p_c_given_ab"),
    };
    Some(get("p_a")? * get(mid)? * get(last)?)
}

fn load_run(run_dir: &Path) -> Result<(RunConfig, Vec<MetricLogRow>), CliError> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| CliError::MissingMetric(format!("{}: {e}", cfg_path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: cfg_path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut rows = Vec::new();
    let mut seed_dirs: Vec<PathBuf> = fs::read_dir(run_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", run_dir.display())))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed_")))
        .collect();
    seed_dirs.sort();
    for dir in seed_dirs {
        let path = dir.join(METRICS_FILE);
        if path.exists() {
            rows.extend(read_rows(&path)?);
        }
    }
    if rows.is_empty() {
        return Err(CliError::MissingMetric(format!("{}: no metric rows under seed_*/{METRICS_FILE}", run_dir.display())));
    }
    Ok((cfg, rows))
}

/// Aggregated tables for one run directory, keyed by figure name.
pub fn export_run(run_dir: &Path, only: Option<&str>) -> Result<BTreeMap<String, Vec<PlotRow>>, CliError> {
    let (cfg, rows) = load_run(run_dir)?;
    let kind = cfg.task_kind;
    let run_id = cfg.run_id();
    let available = figures(kind);
    if let Some(name) = only {
        if !available.iter().any(|(f, _)| *f == name) {
            let names: Vec<&str> = available.iter().map(|(f, _)| *f).collect();
            return Err(CliError::MissingMetric(format!("figure {name:?} not defined for {kind}; available: {names:?}")));
        }
    }
    let mut out = BTreeMap::new();
    for (figure, series) in available {
        if only.is_some_and(|o| o != figure) {
            continue;
        }
        for s in &series {
            if s != "product_recomputed" && !rows.iter().any(|r| r.metrics.contains_key(s)) {
                return Err(CliError::MissingMetric(format!("{}: metric {s:?} absent from logs", run_dir.display())));
            }
        }
        let mut grouped: BTreeMap<(String, String, usize), Vec<Option<f64>>> = BTreeMap::new();
        for r in &rows {
            for s in &series {
                let v = if s == "product_recomputed" {
                    product_recomputed(kind, r)
                } else {
                    r.metrics.get(s).copied().flatten()
                };
                grouped.entry((r.split.clone(), s.clone(), r.epoch)).or_default().push(v);
            }
        }
        let table: Vec<PlotRow> = grouped
            .into_iter()
            .filter_map(|((split, series, epoch), vals)| {
                aggregate(&vals).map(|a| PlotRow {
                    figure: figure.to_string(),
                    run_id: run_id.clone(),
                    task_kind: kind,
                    k: cfg.k,
                    split,
                    series,
                    epoch,
                    mean: a.mean,
                    sem: a.sem,
                    n: a.n,
                })
            })
            .collect();
        out.insert(figure.to_string(), table);
    }
    Ok(out)
}

/// Writes `<out>/<run_id>_<figure>.csv` for each run; returns the written paths.
pub fn cmd_export_plots(run_dirs: &[PathBuf], out_dir: &Path, only: Option<&str>) -> Result<Vec<PathBuf>, CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::Config("export-plots: no run directories given".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let mut written = Vec::new();
    for dir in run_dirs {
        for (figure, rows) in export_run(dir, only)? {
            let run_id = rows.first().map(|r| r.run_id.clone()).unwrap_or_default();
            let path = out_dir.join(format!("{run_id}_{figure}.csv"));
            let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
            let mut w = csv::Writer::from_path(&path).map_err(io)?;
            for r in &rows {
                w.serialize(r).map_err(io)?;
            }
            w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            written.push(path);
        }
    }
    Ok(written)
}
