//! Predictions to event records to flat metric columns.

use std::collections::BTreeMap;

use alchemy_core::metrics::{factorize, reward_binned_metrics, EventRecord, FactorizedMetrics};
use alchemy_core::task::TaskKind;
use alchemy_core::{classify, Episode};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::CliError;

pub type Columns = BTreeMap<String, Option<f64>>;

/// One line of a predictions file; `episode` indexes the split file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRow {
    pub episode: usize,
    pub predicted: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

pub fn records(ds: &Dataset, episodes: &[Episode], predictions: &[usize]) -> Result<Vec<EventRecord>, CliError> {
    if predictions.len() != episodes.len() {
        return Err(CliError::Validation(format!(
            "{} predictions for {} episodes",
            predictions.len(),
            episodes.len()
        )));
    }
    episodes
        .iter()
        .zip(predictions)
        .enumerate()
        .map(|(i, (e, &p))| {
            let chem = ds.chemistry(e.chemistry_id)?;
            classify(chem, e, i, p).map_err(|err| CliError::Validation(format!("episode {i}: {err}")))
        })
        .collect()
}

/// Factorized rates and denominators, plus reward-binned rates for withheld-pair.
pub fn columns(records: &[EventRecord]) -> Result<(FactorizedMetrics, Columns), CliError> {
    let m = factorize(records).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut cols: Columns = m.columns().into_iter().collect();
    if m.task_kind == TaskKind::WithheldPair {
        for bin in reward_binned_metrics(records).values() {
            cols.extend(bin.columns());
        }
    }
    Ok((m, cols))
}

/// Predictions from a file, ordered by episode index and checked for coverage.
pub fn ordered_predictions(rows: &[PredictionRow], episodes: &[Episode]) -> Result<Vec<usize>, CliError> {
    let mut out = vec![None; episodes.len()];
    for (line, r) in rows.iter().enumerate() {
        let slot = out
            .get_mut(r.episode)
            .ok_or_else(|| CliError::Validation(format!("line {}: episode {} out of range", line + 1, r.episode)))?;
        if slot.is_some() {
            return Err(CliError::Validation(format!("line {}: duplicate episode {}", line + 1, r.episode)));
        }
        if let Some(t) = r.target {
            if t != episodes[r.episode].target_class() {
                return Err(CliError::Validation(format!("line {}: target {t} disagrees with dataset", line + 1)));
            }
        }
        *slot = Some(r.predicted);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| CliError::Validation(format!("no prediction for episode {i}"))))
        .collect()
}
