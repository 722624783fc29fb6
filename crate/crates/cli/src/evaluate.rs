//! `evaluate`: factorized metrics for a predictions file or a checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use alchemy_core::metrics::{chance_baseline, ChanceKind};
use alchemy_model::{evaluate, Checkpoint, Trainer};
use serde::Serialize;

use crate::analysis::{self, Columns, PredictionRow};
use crate::dataset::{self, read_jsonl, Dataset};
use crate::train::encode_split;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub dataset_hash: String,
    pub split: String,
    pub n: usize,
    pub metrics: Columns,
    /// `count(C)` equals `n · P[A] · P[mid|A] · P[C|A∩mid]` in exact arithmetic.
    pub chain_rule_exact: bool,
    pub nesting_violations: usize,
    pub chance: BTreeMap<String, Columns>,
}

pub enum Source<'a> {
    Predictions(&'a Path),
    Checkpoint(&'a Path),
}

pub fn predictions_from_checkpoint(ds: &Dataset, split: &str, path: &Path) -> Result<Vec<PredictionRow>, CliError> {
    let ckpt = Checkpoint::load(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let max_seq_len = ckpt.header.model.max_seq_len;
    let trainer = Trainer::from_checkpoint(ckpt).map_err(|e| CliError::Runtime(e.to_string()))?;
    let examples = encode_split(ds.split(split)?, max_seq_len)?;
    let preds = evaluate(trainer.model(), &examples).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(preds
        .into_iter()
        .map(|p| PredictionRow {
            episode: p.index,
            predicted: p.predicted,
            target: Some(p.target),
        })
        .collect())
}

pub fn report(ds: &Dataset, split: &str, rows: &[PredictionRow]) -> Result<EvaluationReport, CliError> {
    let episodes = ds.split(split)?;
    let preds = analysis::ordered_predictions(rows, episodes)?;
    let recs = analysis::records(ds, episodes, &preds)?;
    let (m, metrics) = analysis::columns(&recs)?;
    let pairs: Vec<_> = episodes
        .iter()
        .map(|e| ds.chemistry(e.chemistry_id).map(|c| (c, e)))
        .collect::<Result<_, _>>()?;
    let mut chance = BTreeMap::new();
    for kind in [
        ChanceKind::UniformAll108,
        ChanceKind::UniformInSupport,
        ChanceKind::UniformReachable,
        ChanceKind::UniformCorrectHalf,
    ] {
        // Kinds that do not apply to this task are skipped.
        if let Ok(r) = chance_baseline(kind, pairs.iter().copied()) {
            let mut cols: Columns = r.metrics.columns().into_iter().collect();
            for bin in r.reward_bins.values() {
                cols.extend(bin.columns());
            }
            chance.insert(serde_json::to_value(kind).expect("enum").as_str().unwrap_or_default().to_string(), cols);
        }
    }
    Ok(EvaluationReport {
        dataset_hash: ds.manifest.dataset_hash.clone(),
        split: split.to_string(),
        n: recs.len(),
        metrics,
        chain_rule_exact: m.chain_rule_exact(),
        nesting_violations: recs.iter().filter(|r| !r.nesting_holds()).count(),
        chance,
    })
}

pub fn cmd_evaluate(
    dataset_dir: &Path,
    split: &str,
    source: Source<'_>,
) -> Result<(EvaluationReport, Vec<PredictionRow>), CliError> {
    let ds = dataset::load(dataset_dir)?;
    let rows = match source {
        Source::Predictions(p) => read_jsonl::<PredictionRow>(p)?,
        Source::Checkpoint(p) => predictions_from_checkpoint(&ds, split, p)?,
    };
    Ok((report(&ds, split, &rows)?, rows))
}
